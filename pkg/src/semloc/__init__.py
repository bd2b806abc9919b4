"""Semantic voxel-map localization with learned completion descriptors."""

__version__ = "0.1.0"
