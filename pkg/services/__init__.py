# Experiment pipeline package
