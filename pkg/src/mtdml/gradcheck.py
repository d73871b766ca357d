"""Central-difference gradient checking with kink detection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    worst: tuple | None = None

    def ok(self, tol: float) -> bool:
        return self.n_checked > 0 and self.max_rel_error <= tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor absorbs finite-difference
    round-off on near-zero derivatives."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradient(
    fn: Callable[[], tuple[float, object]],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    h: float = 1e-6,
    names=None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-4,
) -> GradCheckResult:
    """Compare ``analytic`` against central differences of ``fn``.

    ``fn`` evaluates the objective at the current (in-place perturbed)
    ``params`` and returns ``(value, pattern)``, where ``pattern`` encodes
    every piecewise branch taken (ReLU signs, active hinges, ...). A
    coordinate is skipped when either perturbation changes the pattern,
    i.e. when it sits within ``h`` of a kink.
    """
    _, base = fn()
    worst, checked, skipped = 0.0, 0, 0
    where = None
    for name in names or sorted(params):
        arr = params[name]
        coords = list(np.ndindex(arr.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = (rng or np.random.default_rng(0)).choice(len(coords), max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for c in coords:
            orig = arr[c]
            arr[c] = orig + h
            fp, pp = fn()
            arr[c] = orig - h
            fm, pm = fn()
            arr[c] = orig
            if not (_same(pp, base) and _same(pm, base)):
                skipped += 1
                continue
            err = relative_error(float(analytic[name][c]), (fp - fm) / (2 * h), floor)
            checked += 1
            if err > worst:
                worst, where = err, (name, c)
    return GradCheckResult(worst, checked, skipped, where)


def _same(a, b) -> bool:
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)
