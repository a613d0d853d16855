"""Multiscale gradient estimation and coarse-to-fine training for small CNNs."""

__version__ = "0.1.0"
