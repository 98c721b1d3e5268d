"""Continuous refinement of segmentation masks at arbitrary output resolution."""

__version__ = "0.1.0"
