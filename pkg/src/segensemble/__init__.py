"""Ensemble fusion, voxel-wise ensemble uncertainty and scan selection for
multi-class volumetric segmentations."""

__version__ = "0.1.0"
