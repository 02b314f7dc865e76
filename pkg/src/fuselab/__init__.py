"""Desk-scale testbed for multi-layer visual feature fusion strategies."""

from .autodiff import Parameter, ParamStore, Tensor
from .rng import Rng

__all__ = ["Parameter", "ParamStore", "Rng", "Tensor"]

__version__ = "0.1.0"
