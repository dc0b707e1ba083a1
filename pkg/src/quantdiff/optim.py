"""Adam optimizer over named numpy arrays."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place from ``grads`` (keys must match)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for key, p in params.items():
            if not isinstance(p, np.ndarray):
                # numpy scalars are immutable; an in-place update would be lost
                raise ParameterError(f"parameter {key!r} must be an ndarray, got {type(p).__name__}")
            g = np.asarray(grads[key]).astype(p.dtype, copy=False)
            m = self._m.get(key)
            if m is None:
                m = self._m[key] = np.zeros_like(p)
                self._v[key] = np.zeros_like(p)
            v = self._v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
