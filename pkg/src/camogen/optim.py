"""Adam optimizer over a ParamStore."""

from __future__ import annotations

import numpy as np

from .errors import InvariantError
from .params import ParamStore


class Adam:
    """Adam with bias-corrected moment estimates.

    Defaults lr=1e-3, betas=(0.9, 0.999), eps=1e-8. State is exposed as plain
    per-parameter moment arrays so checkpoints can persist it for bit-exact
    resume.
    """

    def __init__(self, params: ParamStore, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for name, p in params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)

    def step(self) -> None:
        """Update all parameters in place from their gradients, then clear them."""
        for name, p in self.params.items():
            if p.grad is None:
                raise InvariantError(f"optimizer step with missing gradient: {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / c1
            vhat = v / c2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
            p.grad = None

    def reset_entry(self, name: str, rows) -> None:
        """Zero the moments of selected rows (used when codebook entries are re-seeded)."""
        self.m[name][rows] = 0.0
        self.v[name][rows] = 0.0
