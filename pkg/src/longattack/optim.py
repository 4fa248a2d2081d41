"""Parameter update rules: SGD with momentum and Adam."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = ["Optimizer"]


class Optimizer:
    """Stateful optimizer over an ordered parameter list.

    ``kind`` is ``"sgd_momentum"`` or ``"adam"``. Moment buffers are created
    lazily to match parameter shapes and are checked on every step; updates
    are applied in place and are deterministic given the state.
    """

    def __init__(
        self,
        kind: str = "adam",
        learning_rate: float = 1e-3,
        momentum: float = 0.9,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if kind not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.kind = kind
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = None  # first moments / velocity
        self._v = None  # second moments (adam only)

    def _init_buffers(self, params):
        self._m = [np.zeros_like(p.data) for p in params]
        if self.kind == "adam":
            self._v = [np.zeros_like(p.data) for p in params]

    def step(self, params: list[Tensor], grads: list[np.ndarray]):
        """Apply one update to ``params`` given matching ``grads``."""
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} params but {len(grads)} grads")
        if self._m is None:
            self._init_buffers(params)
        if len(self._m) != len(params):
            raise ShapeError("parameter list changed size under the optimizer")
        self.step_count += 1
        for i, (p, g) in enumerate(zip(params, grads)):
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape}")
            if self.kind == "sgd_momentum":
                self._m[i] = self.momentum * self._m[i] + g
                p.data -= self.learning_rate * self._m[i]
            else:
                self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
                self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
                mhat = self._m[i] / (1.0 - self.beta1**self.step_count)
                vhat = self._v[i] / (1.0 - self.beta2**self.step_count)
                p.data -= self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)
