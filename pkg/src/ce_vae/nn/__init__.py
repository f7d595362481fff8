"""Double-precision layers with manual backpropagation and the Adam optimizer."""

from ce_vae.nn.layers import (
    BatchNorm1d,
    Conv1d,
    ConvTranspose1d,
    Dense,
    Flatten,
    Layer,
    LayerKind,
    LayerSpec,
    ReLU,
    Sequential,
    Unflatten,
    build_layer,
)
from ce_vae.nn.optim import Adam
from ce_vae.nn.tensor import Tensor

__all__ = [
    "Adam",
    "BatchNorm1d",
    "Conv1d",
    "ConvTranspose1d",
    "Dense",
    "Flatten",
    "Layer",
    "LayerKind",
    "LayerSpec",
    "ReLU",
    "Sequential",
    "Tensor",
    "Unflatten",
    "build_layer",
]
