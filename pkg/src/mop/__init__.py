"""Iterative depth-or-width structured pruning for small decoder-only transformers."""

__version__ = "0.1.0"
