"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .tensor import Tape, Tensor, backward

__all__ = ["GradCheckReport", "gradient_check", "relative_error"]


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tolerance: float
    n_checked: int
    worst_input: int = -1
    worst_index: tuple = ()

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tolerance:g}, {self.n_checked} coords)"


def relative_error(g: np.ndarray, g_hat: np.ndarray) -> np.ndarray:
    """|g - g_hat| / max(1, |g|, |g_hat|), elementwise."""
    denom = np.maximum(1.0, np.maximum(np.abs(g), np.abs(g_hat)))
    return np.abs(g - g_hat) / denom


def gradient_check(
    f: Callable[..., Tensor],
    point: Union[Tensor, Sequence[Tensor]],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f(*points)`` with central differences.

    ``point`` may be one tensor or a sequence; each is perturbed in place one
    coordinate at a time and restored afterwards. ``f`` is free to ignore its
    arguments and close over the tensors instead (handy for parameters).
    All checked tensors must be float64.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        if p.dtype != np.float64:
            raise TypeError(f"gradient_check requires double precision, got {p.dtype}")

    saved = [(p.requires_grad, p.grad) for p in points]
    try:
        for p in points:
            p.requires_grad = True
            p.grad = None
        with Tape():
            out = f(*points)
            backward(out)
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in points]

        worst, worst_at, n = 0.0, (-1, ()), 0
        for k, p in enumerate(points):
            numeric = np.empty_like(p.data)
            for idx in np.ndindex(p.shape):
                orig = p.data[idx]
                p.data[idx] = orig + step
                fp = float(f(*points).data)
                p.data[idx] = orig - step
                fm = float(f(*points).data)
                p.data[idx] = orig
                numeric[idx] = (fp - fm) / (2.0 * step)
            err = relative_error(analytic[k], numeric)
            n += err.size
            if err.size and err.max() > worst:
                worst = float(err.max())
                worst_at = (k, np.unravel_index(int(err.argmax()), err.shape))
    finally:
        for p, (rg, g) in zip(points, saved):
            p.requires_grad, p.grad = rg, g

    return GradCheckReport(
        max_rel_error=worst,
        passed=bool(worst < tolerance),
        tolerance=tolerance,
        n_checked=n,
        worst_input=worst_at[0],
        worst_index=tuple(int(i) for i in worst_at[1]),
    )
