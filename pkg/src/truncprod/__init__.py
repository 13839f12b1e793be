"""Finite-n and limiting correlation kernels for squared singular values of
products of truncated Haar unitary matrices."""

__version__ = "0.1.0"
