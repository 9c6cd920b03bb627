"""Central finite-difference checks for analytic gradients.

An entry passes when ``|a - n| <= atol + rtol * max(|a|, |n|)``, the same mixed
criterion as ``np.allclose``: relative for ordinary gradients, absolute only
below the finite-difference noise level.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-4
DEFAULT_RTOL = 1e-4
DEFAULT_ATOL = 1e-8


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    max_abs_error: float
    worst_index: int
    checked: int
    abs_errors: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False, compare=False)
    scales: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False, compare=False)

    def passed(self, tolerance: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL) -> bool:
        return bool(np.all(self.abs_errors <= atol + tolerance * self.scales))


def relative_error(analytic: np.ndarray | float, numeric: np.ndarray | float, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    indices: Iterable[int] | None = None,
    step: float = DEFAULT_STEP,
) -> dict[int, float]:
    """Central differences of scalar ``fn`` at ``x`` (flat), perturbing one entry at a time."""
    flat = x.reshape(-1)
    out: dict[int, float] = {}
    for i in range(flat.size) if indices is None else indices:
        original = flat[i]
        flat[i] = original + step
        plus = fn(x)
        flat[i] = original - step
        minus = fn(x)
        flat[i] = original
        out[int(i)] = (plus - minus) / (2.0 * step)
    return out


def check_gradient(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    indices: Iterable[int] | None = None,
    step: float = DEFAULT_STEP,
) -> GradCheckReport:
    numeric = numeric_gradient(fn, x, indices, step)
    idx = np.fromiter(numeric.keys(), dtype=np.int64)
    a = analytic.reshape(-1)[idx].astype(np.float64)
    n = np.fromiter(numeric.values(), dtype=np.float64)
    abs_errors = np.abs(a - n)
    scales = np.maximum(np.abs(a), np.abs(n))
    if not idx.size:
        return GradCheckReport(0.0, 0.0, -1, 0, abs_errors, scales)
    # worst entry relative to its own pass threshold
    worst = int(np.argmax(abs_errors / (DEFAULT_ATOL + DEFAULT_RTOL * scales)))
    report = GradCheckReport(
        max_relative_error=float(relative_error(a, n).max()),
        max_abs_error=float(abs_errors.max()),
        worst_index=int(idx[worst]),
        checked=int(idx.size),
        abs_errors=abs_errors,
        scales=scales,
    )
    logger.debug(
        "Gradient check over %d entries: max relative error %.3g, max absolute error %.3g",
        report.checked,
        report.max_relative_error,
        report.max_abs_error,
    )
    return report
