"""Shuffle-instances ViT training on a numpy autograd core."""

__version__ = "0.1.0"
