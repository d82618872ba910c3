"""Normalizing-flow density estimation built around an invertible
per-channel shift composed with an invertible 1x1 convolution."""

from .model import FlowOutput, ModelConfig, MultiScaleModel, bits_per_dim, build_model
from .tensor import Rng

__all__ = ["FlowOutput", "ModelConfig", "MultiScaleModel", "bits_per_dim",
           "build_model", "Rng"]

__version__ = "0.1.0"
