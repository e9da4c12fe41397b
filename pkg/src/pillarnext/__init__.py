"""Sparse pillar-based 3D detection built on a numpy sparse-convolution engine."""

__version__ = "0.1.0"
