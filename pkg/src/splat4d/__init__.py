"""Desk-scale differentiable 4D Gaussian splatting with multi-view depth filtering."""

__version__ = "0.1.0"
