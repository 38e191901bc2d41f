"""Hierarchical pixel -> superpixel -> group segmentation in pure numpy."""

__version__ = "0.1.0"
