"""Depth from posed multi-view images via epipolar attention in a 2D network."""

__version__ = "0.1.0"
