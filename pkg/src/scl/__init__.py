"""Sparse connectivity learning: trainable binary masks relaxed with an identity STE."""

__version__ = "0.1.0"
