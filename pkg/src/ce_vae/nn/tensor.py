"""Double-precision parameter tensor with a gradient buffer."""

from typing import Optional, Sequence

import numpy as np

from ce_vae.exceptions import NonFiniteError, ShapeError


class Tensor:
    """Row-major float64 array plus an optional same-shape gradient.

    Layers own their parameters as ``Tensor`` objects; the optimizer reads ``grad`` and
    writes ``data`` in place.
    """

    def __init__(self, data: np.ndarray, name: str = "", requires_grad: bool = True):
        """Initialize Tensor.

        Args:
            data: Initial values (copied, cast to float64)
            name: Human-readable identifier used in checkpoints and diagnostics
            requires_grad: Whether the optimizer should update this tensor
        """
        self.data = np.array(data, dtype=np.float64, order="C")
        if self.data.ndim == 0 or any(d < 1 for d in self.data.shape):
            raise ShapeError(f"Tensor '{name}' needs positive dimensions, got {self.data.shape}")
        self.name = name
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, shape: Sequence[int], name: str = "", requires_grad: bool = True) -> "Tensor":
        """Create a zero-filled tensor."""
        return cls(np.zeros(tuple(shape)), name=name, requires_grad=requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        """Add ``grad`` into the gradient buffer.

        Raises:
            ShapeError: If ``grad`` does not match the tensor shape
        """
        if grad.shape != self.data.shape:
            raise ShapeError(
                f"Gradient shape {grad.shape} does not match tensor '{self.name}' {self.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def check_finite(self) -> None:
        """Raise if data or gradient holds NaN/Inf."""
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"Tensor '{self.name}' holds non-finite values")
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise NonFiniteError(f"Gradient of tensor '{self.name}' holds non-finite values")

    def copy(self) -> "Tensor":
        clone = Tensor(self.data.copy(), name=self.name, requires_grad=self.requires_grad)
        if self.grad is not None:
            clone.grad = self.grad.copy()
        return clone

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.shape})"
