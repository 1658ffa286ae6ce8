"""Adam optimizer with bias correction.

State (first/second moments plus a shared step counter) lives inside the
optimizer instance; updates are fully deterministic given parameters,
gradients, and hyperparameters.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .engine import Tensor
from .errors import SpecError


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise SpecError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """One bias-corrected update; parameters with no gradient stay put."""
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of the optimizer state for checkpointing."""
        out: dict[str, np.ndarray] = {"step": np.array([float(self.step_count)])}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i]
            out[f"v.{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["step"][0])
        for i in range(len(self.params)):
            m, v = arrays[f"m.{i}"], arrays[f"v.{i}"]
            if m.shape != self.m[i].shape or v.shape != self.v[i].shape:
                raise SpecError(f"optimizer state {i} has mismatched shape")
            self.m[i] = m.copy()
            self.v[i] = v.copy()
