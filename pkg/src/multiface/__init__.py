"""Relational multi-face forgery detection head (numpy, hand-derived gradients)."""

__version__ = "0.1.0"
