"""Data generation, file formats, checkpoints, training and the command line."""
