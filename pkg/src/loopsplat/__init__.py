"""Sparse-input Gaussian splatting with progressive initialization,
depth-alignment regularization and sparse-friendly sampling."""

__version__ = "0.1.0"
