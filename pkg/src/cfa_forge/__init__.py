"""Joint learning of binary color filter arrays and a convolutional demosaicer."""

__version__ = "0.1.0"
