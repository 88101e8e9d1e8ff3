"""Gradient verification against central finite differences.

Meant to run on float64 parameters: float32 rounding is larger than the
truncation error of the central difference at step 1e-5, so 32-bit checks are
not meaningful at the tolerances used here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .params import ParamStore
from .rng import Rng


@dataclass
class GradReport:
    """Per-parameter relative errors between analytic and numeric gradients."""

    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.1e})"


def _rel_err(a: float, n: float, atol: float = 1e-8) -> float:
    # Below atol both values sit in finite-difference noise; treat as equal.
    diff = abs(a - n)
    if diff < atol:
        return 0.0
    return diff / max(abs(a), abs(n), 1e-10)


def grad_check(f, params: ParamStore, step: float = 1e-5, tol: float = 1e-4,
               max_coords_per_param: int | None = None, seed: int = 0) -> GradReport:
    """Compare analytic gradients of the scalar f() against central differences.

    f must be deterministic and read parameter values live from the store. For
    large tensors a deterministic random subset of coordinates can be probed
    via max_coords_per_param; small tensors are checked exhaustively.
    """
    params.zero_grads()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: loss is not finite")
    loss.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}
    params.zero_grads()

    coord_rng = Rng(seed, "gradcheck")
    report = GradReport(tol=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            idx = coord_rng.split(name).permutation(n)[:max_coords_per_param]
        else:
            idx = np.arange(n)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            worst = max(worst, _rel_err(float(analytic[name].reshape(-1)[i]), numeric))
        report.per_param[name] = worst
    return report
