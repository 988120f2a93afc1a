"""Surprisal-gated conditional computation for sequence models."""

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
