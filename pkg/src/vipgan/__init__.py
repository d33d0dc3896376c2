"""Unsupervised 3D shape features from view inter-prediction with per-shape memory."""
from ._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
