"""Adam optimizer over ``Tensor`` parameters."""

import logging
from typing import Dict, List

import numpy as np

from ce_vae.exceptions import NonFiniteError, ShapeError
from ce_vae.nn.tensor import Tensor


logger = logging.getLogger(__name__)


class AdamState:
    """First/second moment buffers and the step counter."""

    def __init__(self, params: List[Tensor]):
        self.m: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.data) for p in params}
        self.v: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.data) for p in params}
        self.step = 0


class Adam:
    """Bias-corrected Adam.

    The state is created fresh for every optimizer instance; fine-tuning and resumed
    training construct a new ``Adam`` on the existing parameters.
    """

    def __init__(
        self,
        params: List[Tensor],
        lr: float = 5e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        """Initialize Adam.

        Args:
            params: Tensors to update; tensors with ``requires_grad=False`` are skipped
            lr: Learning rate
            beta1: Decay of the first moment estimate
            beta2: Decay of the second moment estimate
            eps: Added to the denominator for numerical stability
        """
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        """Apply one update from the accumulated gradients.

        Parameters without a gradient are treated as having a zero gradient.

        Raises:
            NonFiniteError: If any gradient holds NaN/Inf; no parameter is touched then
            ShapeError: If a moment buffer no longer matches its parameter
        """
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"Non-finite gradient for parameter '{p.name}'")

        self.state.step += 1
        t = self.state.step
        correction1 = 1.0 - self.beta1**t
        correction2 = 1.0 - self.beta2**t
        for p in self.params:
            m = self.state.m[id(p)]
            v = self.state.v[id(p)]
            if m.shape != p.shape:
                raise ShapeError(f"Adam state for '{p.name}' has shape {m.shape}, not {p.shape}")
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            p.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
