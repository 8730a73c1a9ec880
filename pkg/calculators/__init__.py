# Reconstruction engines package
