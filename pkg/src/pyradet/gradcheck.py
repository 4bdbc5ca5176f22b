"""Finite-difference verification of analytic gradients.

``grad_check`` re-runs the supplied graph builder with every parameter
promoted to float64 (shadow precision), so the comparison is not drowned
in float32 rounding noise.  Central differences use a fixed step of 1e-3.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

STEP = 1e-3
# Relative error denominator floor: components with true gradient below this
# are effectively checked against an absolute bar of floor * tol.
REL_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst_param: int = -1
    worst_index: int = -1
    analytic: float = 0.0
    numeric: float = 0.0
    per_param: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tol:.1e}) at param {self.worst_param} elem {self.worst_index} "
            f"analytic={self.analytic:.6e} numeric={self.numeric:.6e}"
        )


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    tol: float,
    step: float = STEP,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph from ``params`` on every call and return a
    single-element tensor.  Parameter data is perturbed in place (restored
    afterwards), so ``f`` has to read the live ``Tensor`` objects.
    """
    originals = [p.data for p in params]
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.requires_grad = True
            p.grad = None

        loss = f()
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"grad_check: non-finite loss {loss.item()}")
        loss.backward()
        analytic = [
            p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
        ]

        report = GradCheckReport(max_rel_error=0.0, tol=tol)
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            ana = analytic[pi].reshape(-1)
            worst = 0.0
            for ei in range(flat.size):
                saved = flat[ei]
                flat[ei] = saved + step
                f_plus = f().item()
                flat[ei] = saved - step
                f_minus = f().item()
                flat[ei] = saved
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise FloatingPointError(
                        f"grad_check: non-finite evaluation at param {pi} elem {ei}"
                    )
                numeric = (f_plus - f_minus) / (2.0 * step)
                denom = max(abs(ana[ei]), abs(numeric), REL_FLOOR)
                rel = abs(ana[ei] - numeric) / denom
                if rel > worst:
                    worst = rel
                if rel > report.max_rel_error:
                    report.max_rel_error = rel
                    report.worst_param = pi
                    report.worst_index = ei
                    report.analytic = float(ana[ei])
                    report.numeric = float(numeric)
            report.per_param.append(worst)
        return report
    finally:
        for p, orig in zip(params, originals):
            p.data = orig
            p.grad = None
