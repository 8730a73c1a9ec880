"""Utility modules for phantom shapes and run-directory file formats."""
