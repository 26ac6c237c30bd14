"""Conviformer: a convolutional front-end for gated-positional-attention vision transformers."""

from .tensor import GradTape, Tensor, backward

__version__ = "0.1.0"

__all__ = ["GradTape", "Tensor", "backward", "__version__"]
