"""Incremental RGB-D Gaussian splat mapping for scenes that change."""

from .geometry import Camera, Gaussian
from .gmap import GaussianMap

__version__ = "0.1.0"

__all__ = ["Camera", "Gaussian", "GaussianMap", "__version__"]
