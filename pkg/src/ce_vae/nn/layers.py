"""Layers with hand-written forward/backward passes.

Each layer kind has a functional ``*_forward`` returning ``(out, cache)`` and a matching
``*_backward`` consuming the cache, plus a small stateful ``Layer`` wrapper that owns its
parameters. ``Sequential`` chains wrappers and replays them in reverse for backprop.

Convolutions are cross-correlations (no kernel flip). Arrays are laid out as
``(batch, channels, length)`` for the convolutional layers and ``(batch, features)`` for
dense layers.
"""

import logging
from enum import Enum
from typing import Any, List, NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field, model_validator

from ce_vae.exceptions import BatchSizeError, MissingCacheError, NonFiniteError, ShapeError
from ce_vae.nn.tensor import Tensor


logger = logging.getLogger(__name__)


def conv1d_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    """Output length of a strided, zero-padded 1D convolution."""
    return (length + 2 * padding - kernel) // stride + 1


def conv_transpose1d_output_length(
    length: int, kernel: int, stride: int, padding: int, output_padding: int
) -> int:
    """Output length of a 1D transposed convolution."""
    return (length - 1) * stride - 2 * padding + kernel + output_padding


def _windows(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """View of all kernel windows, shape (B, C, L_out, K)."""
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    return sliding_window_view(padded, kernel, axis=2)[:, :, ::stride, :]


def _overlap_add(cols: np.ndarray, length: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of ``_windows``: scatter-add (B, C, L_out, K) windows into a length-L signal."""
    batch, channels, out_len, kernel = cols.shape
    padded = np.zeros((batch, channels, length + 2 * padding))
    span = stride * (out_len - 1) + 1
    for k in range(kernel):
        padded[:, :, k : k + span : stride] += cols[:, :, :, k]
    return padded[:, :, padding : padding + length]


# --------------------------------------------------------------------------- conv1d


class ConvCache(NamedTuple):
    x: np.ndarray
    weight: np.ndarray
    stride: int
    padding: int
    output_padding: int = 0


def conv1d_forward(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, padding: int
) -> Tuple[np.ndarray, ConvCache]:
    """Strided 1D cross-correlation.

    Args:
        x: Input of shape (B, C_in, L)
        weight: Kernel of shape (C_out, C_in, K)
        bias: Bias of shape (C_out,)
        stride: Step between windows (>= 1)
        padding: Zeros added on both ends

    Returns:
        Output of shape (B, C_out, L_out) and the backward cache

    Raises:
        ShapeError: If channels disagree or the padded input is shorter than the kernel
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d expects 3D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv1d input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    kernel = weight.shape[2]
    if x.shape[2] + 2 * padding < kernel:
        raise ShapeError(
            f"conv1d padded length {x.shape[2] + 2 * padding} is shorter than kernel {kernel}"
        )
    cols = _windows(x, kernel, stride, padding)
    out = np.einsum("bclk,ock->bol", cols, weight, optimize=True) + bias[None, :, None]
    return out, ConvCache(x, weight, stride, padding)


def conv1d_backward(
    grad_out: np.ndarray, cache: Optional[ConvCache]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a conv1d w.r.t. input, weight and bias.

    Raises:
        MissingCacheError: If no forward cache is available
    """
    if cache is None:
        raise MissingCacheError("conv1d backward called without a forward cache")
    x, weight, stride, padding, _ = cache
    kernel = weight.shape[2]
    cols = _windows(x, kernel, stride, padding)
    grad_weight = np.einsum("bol,bclk->ock", grad_out, cols, optimize=True)
    grad_bias = grad_out.sum(axis=(0, 2))
    grad_cols = np.einsum("bol,ock->bclk", grad_out, weight, optimize=True)
    grad_x = _overlap_add(grad_cols, x.shape[2], stride, padding)
    return grad_x, grad_weight, grad_bias


# --------------------------------------------------------------- conv_transpose1d


def conv_transpose1d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    stride: int,
    padding: int,
    output_padding: int = 0,
) -> Tuple[np.ndarray, ConvCache]:
    """1D transposed convolution, the adjoint of ``conv1d_forward`` with the same weight.

    Args:
        x: Input of shape (B, C_in, L)
        weight: Kernel of shape (C_in, C_out, K)
        bias: Bias of shape (C_out,)
        stride: Upsampling step
        padding: Samples cropped from both ends
        output_padding: Extra samples appended at the end (< stride)

    Returns:
        Output of shape (B, C_out, (L-1)*stride - 2*padding + K + output_padding)

    Raises:
        ShapeError: If channels disagree or the output length is not positive
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(
            f"conv_transpose1d expects 3D input and weight, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"conv_transpose1d input has {x.shape[1]} channels but weight expects {weight.shape[0]}"
        )
    if not 0 <= output_padding < max(stride, 1):
        raise ShapeError(f"output_padding {output_padding} must lie in [0, stride={stride})")
    kernel = weight.shape[2]
    out_len = conv_transpose1d_output_length(x.shape[2], kernel, stride, padding, output_padding)
    if out_len <= 0:
        raise ShapeError(f"conv_transpose1d output length {out_len} is not positive")
    cols = np.einsum("bil,iok->bolk", x, weight, optimize=True)
    out = _overlap_add(cols, out_len, stride, padding) + bias[None, :, None]
    return out, ConvCache(x, weight, stride, padding, output_padding)


def conv_transpose1d_backward(
    grad_out: np.ndarray, cache: Optional[ConvCache]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a transposed convolution; the input gradient is a plain conv1d."""
    if cache is None:
        raise MissingCacheError("conv_transpose1d backward called without a forward cache")
    x, weight, stride, padding, _ = cache
    kernel = weight.shape[2]
    cols = _windows(grad_out, kernel, stride, padding)[:, :, : x.shape[2], :]
    grad_x = np.einsum("bolk,iok->bil", cols, weight, optimize=True)
    grad_weight = np.einsum("bil,bolk->iok", x, cols, optimize=True)
    grad_bias = grad_out.sum(axis=(0, 2))
    return grad_x, grad_weight, grad_bias


# ------------------------------------------------------------------------- dense


class DenseCache(NamedTuple):
    x: np.ndarray
    weight: np.ndarray


def dense_forward(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray
) -> Tuple[np.ndarray, DenseCache]:
    """Affine map ``x @ W.T + b`` with ``W`` of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense expects (B, {weight.shape[1]}) input, got {x.shape}")
    return x @ weight.T + bias, DenseCache(x, weight)


def dense_backward(
    grad_out: np.ndarray, cache: Optional[DenseCache]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if cache is None:
        raise MissingCacheError("dense backward called without a forward cache")
    x, weight = cache
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


# -------------------------------------------------------------------- batchnorm


class BatchNormCache(NamedTuple):
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    axes: Tuple[int, ...]
    training: bool


def _bn_axes(x: np.ndarray) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    if x.ndim == 3:
        return (0, 2), (1, -1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm1d expects 2D or 3D input, got {x.shape}")


def batchnorm1d_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tuple[np.ndarray, BatchNormCache]:
    """Per-channel normalization over batch (and length).

    In training mode the batch statistics are used and ``running_mean``/``running_var`` are
    updated in place with ``momentum``; in eval mode the running statistics are used.

    Raises:
        BatchSizeError: If training with a batch of one
    """
    axes, bshape = _bn_axes(x)
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm1d expects {gamma.shape[0]} channels, got {x.shape[1]}")
    if training:
        if x.shape[0] < 2:
            raise BatchSizeError("batchnorm1d in training mode needs a batch of at least 2")
        count = x.size // x.shape[1]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = x_hat * gamma.reshape(bshape) + beta.reshape(bshape)
    cache = BatchNormCache(x_hat, inv_std.reshape(bshape), gamma.reshape(bshape), axes, training)
    return out, cache


def batchnorm1d_backward(
    grad_out: np.ndarray, cache: Optional[BatchNormCache]
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if cache is None:
        raise MissingCacheError("batchnorm1d backward called without a forward cache")
    x_hat, inv_std, gamma, axes, training = cache
    grad_gamma = (grad_out * x_hat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    grad_xhat = grad_out * gamma
    if not training:
        return grad_xhat * inv_std, grad_gamma, grad_beta
    count = x_hat.size // x_hat.shape[1]
    grad_x = (
        inv_std
        / count
        * (
            count * grad_xhat
            - grad_xhat.sum(axis=axes, keepdims=True)
            - x_hat * (grad_xhat * x_hat).sum(axis=axes, keepdims=True)
        )
    )
    return grad_x, grad_gamma, grad_beta


# -------------------------------------------------------------- relu / flatten


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.maximum(x, 0.0), x


def relu_backward(grad_out: np.ndarray, cache: Optional[np.ndarray]) -> np.ndarray:
    if cache is None:
        raise MissingCacheError("relu backward called without a forward cache")
    return grad_out * (cache > 0)


def flatten(x: np.ndarray) -> np.ndarray:
    """Collapse all non-batch axes."""
    return x.reshape(x.shape[0], -1)


# ------------------------------------------------------------------ layer specs


class LayerKind(str, Enum):
    CONV1D = "Conv1d"
    CONV_TRANSPOSE1D = "ConvTranspose1d"
    DENSE = "Dense"
    BATCHNORM1D = "BatchNorm1d"
    RELU = "ReLU"
    FLATTEN = "Flatten"
    UNFLATTEN = "Unflatten"


class LayerSpec(BaseModel):
    """Declarative description of one layer."""

    kind: LayerKind = Field(..., description="Layer kind")
    in_channels: Optional[int] = Field(default=None, ge=1, description="Input channels")
    out_channels: Optional[int] = Field(default=None, ge=1, description="Output channels")
    kernel_size: int = Field(default=1, ge=1, description="Kernel size")
    stride: int = Field(default=1, ge=1, description="Stride")
    padding: int = Field(default=0, ge=0, description="Zero padding per side")
    output_padding: int = Field(default=0, ge=0, description="Transposed-conv output padding")
    features: Optional[int] = Field(default=None, ge=1, description="Batch-norm channels")
    in_features: Optional[int] = Field(default=None, ge=1, description="Dense input size")
    out_features: Optional[int] = Field(default=None, ge=1, description="Dense output size")
    length: Optional[int] = Field(default=None, ge=1, description="Unflatten target length")
    zero_init: bool = Field(default=False, description="Initialize weights and bias to zero")

    @model_validator(mode="after")
    def check_required(self) -> "LayerSpec":
        required = {
            LayerKind.CONV1D: ("in_channels", "out_channels"),
            LayerKind.CONV_TRANSPOSE1D: ("in_channels", "out_channels"),
            LayerKind.DENSE: ("in_features", "out_features"),
            LayerKind.BATCHNORM1D: ("features",),
            LayerKind.UNFLATTEN: ("out_channels", "length"),
        }.get(self.kind, ())
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.kind.value} requires {', '.join(missing)}")
        return self


# ------------------------------------------------------------------------ layers


class Layer:
    """Stateful wrapper around a functional forward/backward pair."""

    kind: LayerKind

    def __init__(self) -> None:
        self.training = False
        self._cache: Any = None

    def parameters(self) -> List[Tensor]:
        return []

    def buffers(self) -> List[Tensor]:
        return []

    def train(self, mode: bool = True) -> None:
        self.training = mode

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Layer):
    kind = LayerKind.CONV1D

    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        super().__init__()
        shape = (spec.out_channels, spec.in_channels, spec.kernel_size)
        fan_in = spec.in_channels * spec.kernel_size
        init = np.zeros(shape) if spec.zero_init else _uniform(rng, shape, fan_in)
        self.weight = Tensor(init, name="weight")
        self.bias = Tensor.zeros((spec.out_channels,), name="bias")
        self.stride = spec.stride
        self.padding = spec.padding

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._cache = conv1d_forward(
            x, self.weight.data, self.bias.data, self.stride, self.padding
        )
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_x, grad_w, grad_b = conv1d_backward(grad_out, self._cache)
        self.weight.accumulate(grad_w)
        self.bias.accumulate(grad_b)
        return grad_x


class ConvTranspose1d(Layer):
    kind = LayerKind.CONV_TRANSPOSE1D

    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        super().__init__()
        shape = (spec.in_channels, spec.out_channels, spec.kernel_size)
        fan_in = spec.in_channels * spec.kernel_size
        init = np.zeros(shape) if spec.zero_init else _uniform(rng, shape, fan_in)
        self.weight = Tensor(init, name="weight")
        self.bias = Tensor.zeros((spec.out_channels,), name="bias")
        self.stride = spec.stride
        self.padding = spec.padding
        self.output_padding = spec.output_padding

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._cache = conv_transpose1d_forward(
            x, self.weight.data, self.bias.data, self.stride, self.padding, self.output_padding
        )
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_x, grad_w, grad_b = conv_transpose1d_backward(grad_out, self._cache)
        self.weight.accumulate(grad_w)
        self.bias.accumulate(grad_b)
        return grad_x


class Dense(Layer):
    kind = LayerKind.DENSE

    def __init__(self, spec: LayerSpec, rng: np.random.Generator):
        super().__init__()
        shape = (spec.out_features, spec.in_features)
        init = np.zeros(shape) if spec.zero_init else _uniform(rng, shape, spec.in_features)
        self.weight = Tensor(init, name="weight")
        self.bias = Tensor.zeros((spec.out_features,), name="bias")

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._cache = dense_forward(x, self.weight.data, self.bias.data)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_x, grad_w, grad_b = dense_backward(grad_out, self._cache)
        self.weight.accumulate(grad_w)
        self.bias.accumulate(grad_b)
        return grad_x


class BatchNorm1d(Layer):
    kind = LayerKind.BATCHNORM1D

    def __init__(self, spec: LayerSpec, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        features = spec.features
        self.gamma = Tensor(np.ones(features), name="gamma")
        self.beta = Tensor.zeros((features,), name="beta")
        self.running_mean = Tensor.zeros((features,), name="running_mean", requires_grad=False)
        self.running_var = Tensor(np.ones(features), name="running_var", requires_grad=False)
        self.momentum = momentum
        self.eps = eps

    def parameters(self) -> List[Tensor]:
        return [self.gamma, self.beta]

    def buffers(self) -> List[Tensor]:
        return [self.running_mean, self.running_var]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._cache = batchnorm1d_forward(
            x,
            self.gamma.data,
            self.beta.data,
            self.running_mean.data,
            self.running_var.data,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        grad_x, grad_gamma, grad_beta = batchnorm1d_backward(grad_out, self._cache)
        self.gamma.accumulate(grad_gamma)
        self.beta.accumulate(grad_beta)
        return grad_x


class ReLU(Layer):
    kind = LayerKind.RELU

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, self._cache = relu_forward(x)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return relu_backward(grad_out, self._cache)


class Flatten(Layer):
    kind = LayerKind.FLATTEN

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x.shape
        return flatten(x)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise MissingCacheError("flatten backward called without a forward cache")
        return grad_out.reshape(self._cache)


class Unflatten(Layer):
    """Inverse of ``Flatten``: (B, C*L) -> (B, C, L)."""

    kind = LayerKind.UNFLATTEN

    def __init__(self, spec: LayerSpec):
        super().__init__()
        self.channels = spec.out_channels
        self.length = spec.length

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.channels * self.length:
            raise ShapeError(
                f"unflatten expects (B, {self.channels * self.length}) input, got {x.shape}"
            )
        self._cache = x.shape
        return x.reshape(x.shape[0], self.channels, self.length)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise MissingCacheError("unflatten backward called without a forward cache")
        return grad_out.reshape(self._cache)


def build_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    """Instantiate a layer from its spec, drawing initial weights from ``rng``."""
    if spec.kind is LayerKind.CONV1D:
        return Conv1d(spec, rng)
    if spec.kind is LayerKind.CONV_TRANSPOSE1D:
        return ConvTranspose1d(spec, rng)
    if spec.kind is LayerKind.DENSE:
        return Dense(spec, rng)
    if spec.kind is LayerKind.BATCHNORM1D:
        return BatchNorm1d(spec)
    if spec.kind is LayerKind.RELU:
        return ReLU()
    if spec.kind is LayerKind.FLATTEN:
        return Flatten()
    return Unflatten(spec)


class Sequential:
    """Ordered layer stack with reverse-mode backpropagation."""

    def __init__(self, layers: List[Layer], name: str = ""):
        self.layers = layers
        self.name = name

    @classmethod
    def from_specs(
        cls, specs: List[LayerSpec], rng: np.random.Generator, name: str = ""
    ) -> "Sequential":
        return cls([build_layer(spec, rng) for spec in specs], name=name)

    def train(self, mode: bool = True) -> None:
        for layer in self.layers:
            layer.train(mode)

    def eval(self) -> None:
        self.train(False)

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_tensors(self) -> List[Tuple[str, Tensor]]:
        """Parameters and buffers in declaration order, keyed ``<stack>.<index>.<name>``."""
        named = []
        for index, layer in enumerate(self.layers):
            for tensor in layer.parameters() + layer.buffers():
                named.append((f"{self.name}.{index}.{tensor.name}", tensor))
        return named

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run all layers, aborting on the first non-finite activation.

        Raises:
            NonFiniteError: Naming the offending layer index
        """
        for index, layer in enumerate(self.layers):
            x = layer.forward(x)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(
                    f"{self.name or 'network'} layer {index} ({layer.kind.value}) "
                    "produced non-finite activations",
                    layer_index=index,
                )
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out
