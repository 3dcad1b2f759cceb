"""Unified panoptic/depth query learning for depth-aware video panoptic segmentation."""

__version__ = "0.1.0"
