"""Coarse-to-fine cerebral aneurysm segmentation on 3D angiography volumes."""

from .volume import LabelVolume, Region, Volume3D

__all__ = ["LabelVolume", "Region", "Volume3D"]
__version__ = "0.1.0"
