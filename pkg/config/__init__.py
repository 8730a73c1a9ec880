# Settings and run configuration package
