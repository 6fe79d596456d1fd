"""Weakly supervised polyp segmentation with a deformable transformer encoder neck."""

__version__ = "0.1.0"
