"""Learned, evolving loss functions trained by a teacher network through unrolled SGD."""

__version__ = "0.1.0"
