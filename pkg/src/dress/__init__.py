"""Regularize-then-prune structured channel pruning on a toy transformer."""

__version__ = "0.1.0"
