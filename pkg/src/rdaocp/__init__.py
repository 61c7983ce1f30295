"""Reconstructed discontinuous approximation for elliptic optimal control."""

__version__ = "0.1.0"
