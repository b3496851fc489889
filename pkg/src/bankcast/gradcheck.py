"""Finite-difference verification of reverse-mode gradients.

The checker treats the loss as a black box over a ParamStore: it backprops
once for analytic gradients, then perturbs every coordinate (or a seeded
subsample when the parameter count is large) and compares against central
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore, backward
from .errors import NondeterministicLoss

SUBSAMPLE_THRESHOLD = 10_000


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        lines = [f"{name}: max rel err {err:.3e}" for name, err in sorted(self.per_param.items())]
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(
            f"{verdict}: {self.n_checked} coordinates, max rel err "
            f"{self.max_rel_err:.3e} (tol {self.tol:.1e})"
        )
        return "\n".join(lines)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def _scalar(var) -> float:
    v = np.asarray(var.value)
    if v.size != 1:
        raise ValueError(f"loss_fn must return a scalar, got shape {v.shape}")
    return float(v.reshape(-1)[0])


def grad_check(
    loss_fn,
    params: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int = SUBSAMPLE_THRESHOLD,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of loss_fn() against central differences.

    loss_fn takes no arguments and must rebuild the graph from the current
    ParamStore values, returning a scalar Var. Relative error uses
    |a - b| / max(1, |a|, |b|) per coordinate.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")

    v1 = _scalar(loss_fn())
    v2 = _scalar(loss_fn())
    if v1 != v2:
        raise NondeterministicLoss(f"two forward passes disagree: {v1!r} vs {v2!r}")

    params.zero_grad()
    out = loss_fn()
    backward(out)
    analytic = {k: g.copy() for k, g in params.grads().items()}
    params.zero_grad()

    coords = [(name, i) for name, var in params.items() for i in range(var.value.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    report = GradCheckReport(eps=eps, tol=tol)
    for name, i in coords:
        flat = params[name].value.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = _scalar(loss_fn())
        flat[i] = orig - eps
        f_minus = _scalar(loss_fn())
        flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        err = _rel_err(fd, float(analytic[name].reshape(-1)[i]))
        report.per_param[name] = max(report.per_param.get(name, 0.0), err)
        report.n_checked += 1
    return report
