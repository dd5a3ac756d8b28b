"""Budget-constrained sensor placement: relaxation, rounding, greedy, enumeration.

All routines work on a :class:`~pmuopt.covariance.PlacementModel`, i.e. a
prior plus a candidate set, and minimize one metric of the posterior
covariance subject to ``sum(c_i x_i) <= b``.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .covariance import Metric, PlacementModel, PosteriorCovariance, _row_quadratic, metric_value
from .errors import NonFiniteObjective, TooLarge
from .projection import BoxSimplex, project

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9
BRUTE_FORCE_MAX = 22
REPORT_SCHEMA = 1
REPORT_COLUMNS = (
    "metric", "budget", "f_lb", "f_convex_best", "f_feas", "f_greedy", "iters", "seconds",
    "feas_ids", "greedy_ids",
)


@dataclass
class PlacementVector:
    x: np.ndarray
    c: np.ndarray
    b: float
    binary: bool = True

    @property
    def selected(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.x > 0.5)] if self.binary else [
            int(i) for i in np.flatnonzero(self.x > 0)
        ]

    @property
    def cost(self) -> float:
        return float(self.c @ self.x)

    def is_feasible(self, tol: float = FEAS_TOL) -> bool:
        x = self.x
        in_domain = np.all((x == 0) | (x == 1)) if self.binary else np.all((x >= -tol) & (x <= 1 + tol))
        return bool(in_domain and self.cost <= self.b + tol)


@dataclass(frozen=True)
class DescentConfig:
    alpha: float = 1.0
    max_iter: int = 500
    rel_tol: float = 1e-6
    patience: int = 50
    x0_policy: str = "uniform_budget"
    x0: np.ndarray | None = None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.x0_policy not in ("uniform_budget", "zero", "custom"):
            raise ValueError(f"unknown x0_policy {self.x0_policy!r}")
        if self.x0_policy == "custom" and self.x0 is None:
            raise ValueError("x0_policy='custom' needs x0")


def knapsack_min(g: np.ndarray, c: np.ndarray, b: float) -> tuple[float, np.ndarray]:
    """Minimize ``g @ x`` over ``{x in [0,1]^n : c @ x <= b}`` (fractional knapsack)."""
    x = np.zeros_like(g, dtype=float)
    remaining = float(b)
    for i in np.argsort(g / c, kind="stable"):
        if g[i] >= 0 or remaining <= 0:
            break
        take = min(1.0, remaining / c[i])
        x[i] = take
        remaining -= take * c[i]
    return float(g @ x), x


@dataclass
class ConvexResult:
    x_best: np.ndarray
    f_convex_best: float
    f_lb: float
    iterations: int
    history: list = field(default_factory=list, repr=False)
    lb_history: list = field(default_factory=list, repr=False)


def _initial_x(config: DescentConfig, c: np.ndarray, b: float) -> np.ndarray:
    if config.x0_policy == "zero":
        return np.zeros_like(c)
    if config.x0_policy == "custom":
        x0 = np.clip(np.asarray(config.x0, dtype=float), 0.0, 1.0)
        y = project(x0 * c, BoxSimplex(b, c))
        return np.clip(y / c, 0.0, 1.0)
    return np.full_like(c, min(1.0, b / c.sum()))


def projected_subgradient(
    metric, model: PlacementModel, b: float, config: DescentConfig | None = None
) -> ConvexResult:
    """Projected subgradient descent on the relaxed problem, in cost-scaled variables.

    Iterates on ``y = c * x`` so the feasible set is a budgeted box, with
    step ``alpha / (k ||grad_y||)``. Every iterate also yields a certified
    lower bound ``f(x) + min_{x' feasible} g @ (x' - x)``; the best of these
    is returned as ``f_lb``.
    """
    metric = Metric.parse(metric)
    config = config or DescentConfig()
    c = model.costs
    if model.n_x == 0:
        raise ValueError("candidate set is empty")
    if not b >= 0:
        raise ValueError("budget must be nonnegative")
    if b == 0:
        x0 = np.zeros(model.n_x)
        cov = model.posterior(x0)
        f0 = metric_value(cov, metric)
        return ConvexResult(x0, f0, model.certificate_value(cov, metric), 0, [f0], [f0])
    if b < c.min():
        logger.warning("budget %.4g is below the cheapest sensor (%.4g); only the relaxation is non-trivial", b, c.min())
    box = BoxSimplex(b, c)
    x = _initial_x(config, c, b)
    y = x * c

    best_f, x_best, f_lb = np.inf, x.copy(), -np.inf
    history, lb_history = [], []
    k = 0
    for k in range(1, config.max_iter + 1):
        cov = model.posterior(x)
        f = metric_value(cov, metric)
        g = model.gradient(cov, metric)
        if not (np.isfinite(f) and np.all(np.isfinite(g))):
            raise NonFiniteObjective(f"non-finite objective or gradient at iteration {k} (f={f})")
        lin, _ = knapsack_min(g, c, b)
        lb = model.certificate_value(cov, metric) + lin - float(g @ x)
        f_lb = max(f_lb, lb)
        if f < best_f:
            best_f, x_best = f, x.copy()
        history.append(best_f)
        lb_history.append(f_lb)

        if k > config.patience:
            ref = history[k - 1 - config.patience]
            if ref - best_f <= config.rel_tol * abs(best_f):
                break
        gy = g / c
        norm = float(np.linalg.norm(gy))
        if norm == 0.0:
            break
        z = y - config.alpha / (k * norm) * gy
        y = project(np.maximum(z, 0.0), box)
        x = np.clip(y / c, 0.0, 1.0)
    return ConvexResult(x_best, float(best_f), float(f_lb), k, history, lb_history)


def round_convex(x_convex, c, b) -> PlacementVector:
    """Greedily switch on the largest relaxed weights while the budget allows.

    Only candidates affordable with the remaining budget are eligible; ties
    go to the cheaper, then lower-index candidate.
    """
    xc = np.asarray(x_convex, dtype=float)
    c = np.asarray(c, dtype=float)
    x = np.zeros_like(xc)
    remaining = float(b)
    order = np.lexsort((np.arange(xc.size), c, -xc))  # by -x, then cost, then index
    while True:
        pick = next((i for i in order if x[i] == 0 and c[i] <= remaining + 1e-12), None)
        if pick is None:
            break
        x[pick] = 1.0
        remaining -= c[pick]
    return PlacementVector(x, c, float(b), binary=True)


def _scores_after_add(model: PlacementModel, cov: PosteriorCovariance, metric: Metric, f_now: float, idx):
    """Metric value after adding each candidate in ``idx`` alone (rank-one algebra)."""
    C = model.C[idx]
    rho = model.w[idx]
    sigma = cov.Sigma_post
    P = np.asarray(C @ sigma)  # rows c_i Sigma = (Sigma c_i^H)^H
    q = _row_quadratic(C, P)
    gain = rho / (1.0 + rho * q)
    if metric is Metric.A:
        return f_now - gain * np.sum(np.abs(P) ** 2, axis=1)
    if metric is Metric.D:
        return f_now - np.log1p(rho * q)
    if metric is Metric.M:
        d = np.real(np.diag(sigma))
        return np.max(d[None, :] - gain[:, None] * np.abs(P) ** 2, axis=1)
    # E: largest root of the secular equation of a rank-one downdate
    lam, Q = sla.eigh(sigma)
    t2 = np.abs(np.asarray(C @ Q) * lam[None, :]) ** 2  # |Q^H Sigma c_i^H|^2
    top = lam[-1]
    second = lam[-2] if lam.size > 1 else -np.inf
    lo = np.maximum(second, top - gain * t2.sum(axis=1))
    hi = np.full(len(idx), top)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            sec = 1.0 - gain * np.sum(t2 / (lam[None, :] - mid[:, None]), axis=1)
        right = ~(sec <= 0)  # root lies above mid (also when the sum is undefined at a pole)
        lo = np.where(right, mid, lo)
        hi = np.where(right, hi, mid)
        if np.all(hi - lo <= 4 * np.spacing(np.maximum(np.abs(hi), 1e-300))):
            break
    return hi


@dataclass
class GreedyResult:
    placement: PlacementVector
    f_greedy: float
    order: list
    trajectory: list


def greedy_cost_effective(
    metric, model: PlacementModel, b: float, variant: str = "as_written"
) -> GreedyResult:
    """Forward greedy selection under the budget.

    ``as_written`` picks ``argmin f(x + e_i) / c_i``; ``improvement_ratio``
    picks ``argmax (f(x) - f(x + e_i)) / c_i``. Stops when no unselected
    candidate fits in the remaining budget; the final value is recomputed
    from scratch.
    """
    metric = Metric.parse(metric)
    if variant not in ("as_written", "improvement_ratio"):
        raise ValueError(f"unknown greedy variant {variant!r}")
    c = model.costs
    cov = model.posterior(np.zeros(model.n_x))
    f_now = metric_value(cov, metric)
    remaining = float(b)
    order, trajectory = [], [f_now]
    while True:
        idx = np.flatnonzero((cov.x == 0) & (c <= remaining + 1e-12))
        if idx.size == 0:
            break
        after = _scores_after_add(model, cov, metric, f_now, idx)
        if variant == "as_written":
            pick = idx[int(np.argmin(after / c[idx]))]
        else:
            pick = idx[int(np.argmax((f_now - after) / c[idx]))]
        cov = model.rank_one_add(cov, int(pick))
        f_now = metric_value(cov, metric)
        remaining -= c[pick]
        order.append(int(pick))
        trajectory.append(f_now)
    x = cov.x
    f_final = metric_value(model.posterior(x), metric) if order else trajectory[0]
    return GreedyResult(PlacementVector(x, c, float(b)), f_final, order, trajectory)


def brute_force_opt(metric, model: PlacementModel, b: float) -> tuple[np.ndarray, float]:
    """Exact optimum by enumerating every affordable binary placement.

    Placements are visited in lexicographic order and only strict
    improvements are kept, so ties resolve to the lexicographically
    smallest ``x``.
    """
    metric = Metric.parse(metric)
    n = model.n_x
    if n > BRUTE_FORCE_MAX:
        raise TooLarge(f"enumeration is limited to {BRUTE_FORCE_MAX} candidates, got {n}")
    c = model.costs
    best = [np.inf, np.zeros(n)]

    def visit(i, cov, spent):
        if i == n:
            f = metric_value(cov, metric)
            if f < best[0]:
                best[0], best[1] = f, cov.x.copy()
            return
        visit(i + 1, cov, spent)
        if spent + c[i] <= b + 1e-12:
            visit(i + 1, model.rank_one_add(cov, i), spent + c[i])

    visit(0, model.posterior(np.zeros(n)), 0.0)
    x_opt = best[1]
    return x_opt, metric_value(model.posterior(x_opt), metric)


@dataclass
class BoundsReport:
    metric: str
    budget: float
    f_lb: float
    f_convex_best: float
    f_feas: float
    f_greedy: float
    feas_ids: list
    greedy_ids: list
    iterations: int
    seconds: float

    @property
    def gap(self) -> float:
        return min(self.f_greedy, self.f_feas) - self.f_lb

    @property
    def relative_gap(self) -> float:
        return self.gap / abs(self.f_lb) if self.f_lb != 0 else np.inf

    def violations(self, tol: float = 1e-9) -> list[str]:
        out = []
        if self.f_lb > self.f_convex_best + tol * min(1.0, abs(self.f_convex_best)) + 0.0:
            out.append("f_lb > f_convex_best")
        upper = min(self.f_greedy, self.f_feas)
        if self.f_lb > upper + tol * min(1.0, abs(upper)):
            out.append("f_lb > min(f_greedy, f_feas)")
        return out

    def row(self, timing: bool = True) -> list[str]:
        return [
            self.metric, repr(self.budget), repr(self.f_lb), repr(self.f_convex_best),
            repr(self.f_feas), repr(self.f_greedy), str(self.iterations),
            f"{self.seconds:.3f}" if timing else "",
            " ".join(map(str, self.feas_ids)), " ".join(map(str, self.greedy_ids)),
        ]


def compute_bounds(
    metric,
    model: PlacementModel,
    b: float,
    config: DescentConfig | None = None,
    greedy_variant: str = "as_written",
) -> BoundsReport:
    """Lower bound from the relaxation, upper bounds from rounding and greedy."""
    metric = Metric.parse(metric)
    t0 = time.perf_counter()
    conv = projected_subgradient(metric, model, b, config)
    feas = round_convex(conv.x_best, model.costs, b)
    f_feas = metric_value(model.posterior(feas.x), metric)
    greedy = greedy_cost_effective(metric, model, b, greedy_variant)
    report = BoundsReport(
        metric.value, float(b), conv.f_lb, conv.f_convex_best, f_feas, greedy.f_greedy,
        feas.selected, greedy.placement.selected, conv.iterations, time.perf_counter() - t0,
    )
    for v in report.violations():
        logger.error("bound invariant violated for metric %s, budget %g: %s", metric.value, b, v)
    return report


def reports_to_csv(reports, header: bool = True, timing: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        buf.write(f"# pmuopt bounds schema {REPORT_SCHEMA}\n")
        w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(r.row(timing))
    return buf.getvalue()


def read_reports_csv(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
