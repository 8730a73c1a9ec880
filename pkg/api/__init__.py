# HTTP endpoints package
