"""Structured-prior multilevel regression and poststratification for survey weighting."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
