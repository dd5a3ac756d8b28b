"""Euclidean projection onto the budgeted box {y : sum(y) <= b, 0 <= y_i <= c_i}.

The projection has the form ``y_i = min(max(z_i - delta, 0), c_i)`` for a
shift ``delta >= 0``. ``project`` locates the shift with the threshold
search described below; ``project_oracle`` finds it by bisection and is
meant for testing only.

Threshold search, with ``h(t) = sum_i min(max(z_i - t, 0), c_i)``
(non-increasing in ``t``):

1. null sensors: ``z0`` is the largest ``z_j`` with ``h(z_j) >= b``
   (0 when there is none);
2. full sensors: ``zt1`` is the smallest ``z_j - c_j`` with ``h(.) <= b``
   (+inf when there is none);
3. ``delta`` is ``z0`` if ``h(z0) == b``, else ``zt1`` if ``h(zt1) == b``,
   otherwise it solves the budget equation on the entries strictly between
   the two thresholds.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, NegativeInput

SUM_TOL = 1e-12
ORACLE_MAX = 5000


@dataclass(frozen=True)
class BoxSimplex:
    b: float
    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if not self.b > 0:
            raise ValueError(f"budget must be positive, got {self.b}")
        if c.size == 0:
            raise EmptyInput("box-simplex needs at least one coordinate")
        if np.any(c <= 0):
            raise ValueError("box bounds c_i must be positive")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "b", float(self.b))

    def contains(self, y, tol=1e-9) -> bool:
        y = np.asarray(y, dtype=float)
        return bool(np.all(y >= -tol) and np.all(y <= self.c + tol) and y.sum() <= self.b + tol)


def _check(z, box: BoxSimplex) -> np.ndarray:
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size == 0:
        raise EmptyInput("cannot project an empty vector")
    if z.shape != box.c.shape:
        raise ValueError(f"z has {z.size} entries, box has {box.c.size}")
    if np.any(z < 0):
        raise NegativeInput(f"projection input must be nonnegative (min {z.min():.3e})")
    return z


class _ClippedSum:
    """Evaluates h(t) = sum_i min(max(z_i - t, 0), c_i) at many t in O(log n) each."""

    def __init__(self, z, c):
        self.zt = z - c
        oz = np.argsort(z, kind="stable")
        self.z_sorted = z[oz]
        # suffix sums over entries ordered by z
        self.z_suffix = np.concatenate([np.cumsum(self.z_sorted[::-1])[::-1], [0.0]])
        ot = np.argsort(self.zt, kind="stable")
        self.zt_sorted = self.zt[ot]
        self.c_suffix_t = np.concatenate([np.cumsum(c[ot][::-1])[::-1], [0.0]])
        self.z_suffix_t = np.concatenate([np.cumsum(z[ot][::-1])[::-1], [0.0]])
        self.n = z.size

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        # entries with z_i > t contribute z_i - t, capped at c_i for z_i - c_i >= t
        k = np.searchsorted(self.z_sorted, t, side="right")
        above = self.z_suffix[k] - t * (self.n - k)
        kt = np.searchsorted(self.zt_sorted, t, side="left")
        full_c = self.c_suffix_t[kt]
        full_z = self.z_suffix_t[kt] - t * (self.n - kt)
        return above - full_z + full_c


def project(z, box: BoxSimplex, return_delta: bool = False):
    """Project nonnegative ``z`` onto ``box``; optionally also return the shift."""
    z = _check(z, box)
    c, b = box.c, box.b
    clipped = np.minimum(z, c)
    if clipped.sum() <= b + SUM_TOL:
        return (clipped, 0.0) if return_delta else clipped

    h = _ClippedSum(z, c)
    zt = z - c

    # step 1: null-sensor threshold
    hz = h(z)
    ok = hz >= b - SUM_TOL
    z0 = float(z[ok].max()) if np.any(ok) else 0.0
    # step 2: full-sensor threshold
    hzt = h(zt)
    ok = hzt <= b + SUM_TOL
    zt1 = float(zt[ok].min()) if np.any(ok) else np.inf

    if abs(float(h(z0)) - b) <= SUM_TOL:
        delta = z0  # case 1
    elif np.isfinite(zt1) and abs(float(h(zt1)) - b) <= SUM_TOL:
        delta = zt1  # case 2
    else:  # case 3
        full = zt >= zt1
        partial = (z > z0) & (zt < zt1)
        if partial.any():
            delta = (-b + c[full].sum() + z[partial].sum()) / partial.sum()
        else:  # only reachable through rounding at the tolerance boundary
            delta = min((z0, zt1), key=lambda t: abs(float(h(t)) - b) if np.isfinite(t) else np.inf)
    delta = max(float(delta), 0.0)
    y = np.minimum(np.maximum(z - delta, 0.0), c)
    return (y, delta) if return_delta else y


def project_oracle(z, box: BoxSimplex, tol: float = 1e-12) -> np.ndarray:
    """Reference projection: bisection on the shift of the clipped vector."""
    z = _check(z, box)
    if z.size > ORACLE_MAX:
        raise ValueError(f"oracle limited to {ORACLE_MAX} coordinates")
    c, b = box.c, box.b

    def total(lam):
        return np.minimum(np.maximum(z - lam, 0.0), c).sum()

    if total(0.0) <= b:
        return np.minimum(z, c)
    lo, hi = 0.0, float(z.max())
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if total(mid) > b:
            lo = mid
        else:
            hi = mid
        if mid in (lo, hi) and hi - lo <= np.spacing(hi) * 2:
            break
    return np.minimum(np.maximum(z - hi, 0.0), c)


@dataclass(frozen=True)
class KKTReport:
    lam: float
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    @property
    def max_residual(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


def kkt_residuals(z, y, box: BoxSimplex, tol: float = 1e-9) -> KKTReport:
    """Optimality residuals of ``y`` as the projection of ``z`` onto ``box``.

    The budget multiplier is reconstructed from the free coordinates (median
    of ``z_i - y_i``), or set to zero when the budget is slack; the bound
    multipliers follow from stationarity on the coordinates at their bounds.
    """
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    c, b = box.c, box.b
    at_top = y >= c - tol
    at_zero = (y <= tol) & ~at_top
    free = ~(at_top | at_zero)
    if y.sum() < b - tol:
        lam = 0.0
    elif np.any(free):
        lam = float(np.median(z[free] - y[free]))
    else:
        lower = max([0.0] + list(z[at_zero]))
        lam = lower
    mu_up = np.where(at_top, np.maximum(z - c - lam, 0.0), 0.0)
    mu_lo = np.where(at_zero, np.maximum(lam - z, 0.0), 0.0)
    stat = np.abs(y - z + mu_up - mu_lo + lam)
    primal = max(0.0, float(np.max(y - c)), float(np.max(-y)), float(y.sum() - b))
    dual = max(0.0, -lam, float(np.max(-mu_up)), float(np.max(-mu_lo)))
    comp = max(
        float(np.max(np.abs((y - c) * mu_up))),
        float(np.max(np.abs(y * mu_lo))),
        abs(lam * (y.sum() - b)),
    )
    return KKTReport(lam, float(stat.max()), primal, dual, comp)
