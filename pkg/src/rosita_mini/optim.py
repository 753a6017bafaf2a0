"""Adam with bias correction, aware of structural surgery.

Moment estimates are keyed by parameter name and sliced with exactly the
same index sets as the parameters when units are pruned, so surviving
entries keep their optimizer state.
"""

from __future__ import annotations

import numpy as np

from .pruning import SurgeryReport
from .tensor import Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        """One bias-corrected update; aborts before mutating on NaN grads."""
        if set(params) != set(self.m):
            raise RuntimeError(
                "optimizer state out of sync with parameters "
                "(apply_surgery on the optimizer after pruning)"
            )
        grads = {}
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if np.isnan(g).any():
                raise FloatingPointError(f"NaN gradient on {name}; step aborted")
            grads[name] = g

        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = grads[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def apply_surgery(self, report: SurgeryReport) -> None:
        """Slice moments with the same kept-index sets as the parameters."""
        for name, slices in report.kept.items():
            for axis, kept_idx in slices:
                self.m[name] = np.take(self.m[name], kept_idx, axis=axis)
                self.v[name] = np.take(self.v[name], kept_idx, axis=axis)
        for name in report.removed:
            del self.m[name]
            del self.v[name]
