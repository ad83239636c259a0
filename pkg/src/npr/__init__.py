"""Hybrid point-cloud rendering: Gaussian splatting and feature-field volume rendering."""
from npr._backend import BACKEND, available_backends

__version__ = "0.1.0"

__all__ = ["BACKEND", "available_backends", "__version__"]
