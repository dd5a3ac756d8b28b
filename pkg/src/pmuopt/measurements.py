"""Candidate PMU measurements: measurement rows, noise variances and costs."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateMeasurement, InvalidConfig, UnknownCandidate
from .grid import PHASES, AdmittanceMatrix, GridModel, build_admittance, shared_phases

logger = logging.getLogger(__name__)

KINDS = ("bus_voltage", "bus_current", "branch_current")
SIGMA_MAG = 0.01
SIGMA_ANG = 0.01
Z_FLOOR = 1e-6


@dataclass(frozen=True)
class CandidateMeasurement:
    id: int
    kind: str
    bus: int
    phase: str
    neighbor: int | None = None
    cost: float = 1.0
    sigma_mag: float = SIGMA_MAG
    sigma_ang: float = SIGMA_ANG

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnknownCandidate(f"unknown measurement kind {self.kind!r}")
        if (self.kind == "branch_current") != (self.neighbor is not None):
            raise UnknownCandidate("branch_current candidates (and only those) need a neighbor bus")

    @property
    def location(self) -> str:
        if self.kind == "branch_current":
            return f"{self.bus}->{self.neighbor}.{self.phase}"
        return f"{self.bus}.{self.phase}"


@dataclass(frozen=True)
class CostRule:
    """How installation costs are assigned: ``fixed`` value or seeded ``normal`` draws."""

    kind: str = "fixed"
    value: float = 1.0
    mean: float = 1.0
    std: float = 0.1
    floor: float = 0.1
    seed: int = 0

    def costs(self, n: int) -> np.ndarray:
        if self.kind == "fixed":
            if self.value <= 0:
                raise InvalidConfig("fixed cost must be positive")
            return np.full(n, float(self.value))
        if self.kind == "normal":
            rng = np.random.default_rng(self.seed)
            return np.maximum(rng.normal(self.mean, self.std, size=n), self.floor)
        raise InvalidConfig(f"unknown cost rule {self.kind!r}")


def _row_entries(grid: GridModel, adm: AdmittanceMatrix, cand: CandidateMeasurement):
    """Sparse form of a measurement row: (state columns, values, known source offset)."""
    src = grid.source.id
    by_id = grid.bus_by_id
    if cand.bus not in by_id or cand.phase not in by_id[cand.bus].phases or cand.bus == src:
        raise UnknownCandidate(f"candidate {cand.id}: no non-source phase {cand.bus}.{cand.phase}")
    r = adm.index[(cand.bus, cand.phase)]

    if cand.kind == "bus_voltage":
        return np.array([r - 3]), np.array([1.0 + 0j]), 0j

    if cand.kind == "bus_current":
        row = adm.Y.getrow(r)
        cols, vals = row.indices, row.data
        order = np.argsort(cols)
        cols, vals = cols[order], vals[order]
        offset = complex(np.sum(vals[cols < 3] * grid.v_source[cols[cols < 3]]))
        keep = cols >= 3
        return cols[keep] - 3, vals[keep].astype(complex), offset

    m = cand.neighbor
    br = grid.branch_between(cand.bus, m)
    if br is None or cand.phase not in shared_phases(by_id[cand.bus], by_id[m]):
        raise UnknownCandidate(f"candidate {cand.id}: no branch {cand.bus}->{m} on phase {cand.phase}")
    phases = shared_phases(by_id[br.from_bus], by_id[br.to_bus])
    k = phases.index(cand.phase)
    w = complex(br.admittance[k, k])
    # current flowing i -> m on this phase: w (V_i - V_m)
    if m == src:
        return np.array([r - 3]), np.array([w]), -w * grid.v_source[PHASES.index(cand.phase)]
    c_m = adm.index[(m, cand.phase)] - 3
    return np.array([r - 3, c_m]), np.array([w, -w]), 0j


def measurement_row(grid: GridModel, candidate: CandidateMeasurement, admittance=None) -> np.ndarray:
    """Dense row of the measurement matrix mapping non-source voltages to ``candidate``."""
    adm = admittance or build_admittance(grid)
    cols, vals, _ = _row_entries(grid, adm, candidate)
    row = np.zeros(adm.n, dtype=complex)
    np.add.at(row, cols, vals)
    return row


def measurement_offset(grid: GridModel, candidate: CandidateMeasurement, admittance=None) -> complex:
    """Known contribution of the source voltages to ``candidate``'s reading."""
    adm = admittance or build_admittance(grid)
    return _row_entries(grid, adm, candidate)[2]


def measurement_noise_variance(candidate: CandidateMeasurement, z_value: complex, floor: float = Z_FLOOR) -> float:
    mag = abs(z_value)
    if mag < floor:
        raise DegenerateMeasurement(
            f"candidate {candidate.id}: |z| = {mag:.3e} is below the floor {floor:.1e}"
        )
    return (candidate.sigma_mag**2 + candidate.sigma_ang**2) * mag**2


def apply_noise(z_true, seed=None, sigma_mag=SIGMA_MAG, sigma_ang=SIGMA_ANG) -> np.ndarray:
    """Corrupt phasors with relative magnitude and angle noise.

    ``z = z_true + diag(z_true) (w_mag + j w_ang)`` with independent
    zero-mean Gaussians of standard deviation ``sigma_mag``/``sigma_ang``.
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = np.asarray(z_true, dtype=complex)
    w_mag = rng.standard_normal(z.shape) * sigma_mag
    w_ang = rng.standard_normal(z.shape) * sigma_ang
    return z + z * (w_mag + 1j * w_ang)


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """All candidate measurements with their stacked rows, noise and costs.

    Row ``i`` of ``C_tilde`` (sparse, ``n_x x N``) belongs to ``candidates[i]``,
    whose ``id`` equals ``i``.
    """

    candidates: tuple[CandidateMeasurement, ...]
    C_tilde: sp.csr_matrix
    offsets: np.ndarray
    z_pred: np.ndarray
    Sigma_meas_diag: np.ndarray
    sigma_psd: float = 0.5

    @property
    def n_x(self) -> int:
        return len(self.candidates)

    @property
    def c(self) -> np.ndarray:
        return np.array([cand.cost for cand in self.candidates])

    @property
    def weights(self) -> np.ndarray:
        """Diagonal of the inverse measurement covariance."""
        return 1.0 / self.Sigma_meas_diag

    def subset(self, ids) -> "CandidateSet":
        """Candidates ``ids`` only, renumbered 0..k-1 in the given order."""
        ids = [int(i) for i in ids]
        cands = tuple(replace(self.candidates[i], id=k) for k, i in enumerate(ids))
        return CandidateSet(
            cands,
            self.C_tilde[ids],
            self.offsets[ids],
            self.z_pred[ids],
            self.Sigma_meas_diag[ids],
            self.sigma_psd,
        )

    def with_costs(self, costs) -> "CandidateSet":
        costs = np.asarray(costs, dtype=float)
        cands = tuple(replace(cand, cost=float(cost)) for cand, cost in zip(self.candidates, costs))
        return CandidateSet(cands, self.C_tilde, self.offsets, self.z_pred, self.Sigma_meas_diag, self.sigma_psd)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "kind", "bus", "phase", "neighbor", "cost", "sigma_mag", "sigma_ang"])
        for cand in self.candidates:
            w.writerow([
                cand.id, cand.kind, cand.bus, cand.phase,
                "" if cand.neighbor is None else cand.neighbor,
                repr(cand.cost), repr(cand.sigma_mag), repr(cand.sigma_ang),
            ])
        return buf.getvalue()


def _raw_candidates(grid: GridModel, kinds):
    src = grid.source.id
    out = []
    if "bus_voltage" in kinds:
        out += [("bus_voltage", b.id, p, None) for b in grid.non_source_buses for p in b.phases]
    if "bus_current" in kinds:
        out += [("bus_current", b.id, p, None) for b in grid.non_source_buses for p in b.phases]
    if "branch_current" in kinds:
        by_id = grid.bus_by_id
        for br in grid.branches:
            phases = shared_phases(by_id[br.from_bus], by_id[br.to_bus])
            for i, m in ((br.from_bus, br.to_bus), (br.to_bus, br.from_bus)):
                if i == src:
                    continue
                out += [("branch_current", i, p, m) for p in phases]
    return out


def enumerate_candidates(
    grid: GridModel,
    cost_rule: CostRule | None = None,
    v_prior: np.ndarray | None = None,
    kinds=KINDS,
    sigma_mag: float = SIGMA_MAG,
    sigma_ang: float = SIGMA_ANG,
    sigma_psd: float = 0.5,
    z_floor: float = Z_FLOOR,
    admittance: AdmittanceMatrix | None = None,
) -> CandidateSet:
    """Every PMU measurement that could be installed on ``grid``.

    One voltage and one bus-current candidate per non-source (bus, phase),
    and one branch-current candidate per branch phase and direction, measured
    at its non-source end. Noise variances are evaluated at the readings
    predicted from ``v_prior`` (the power-flow solution of the grid loads
    when omitted, flat voltages if that fails). Candidates whose predicted
    magnitude is below ``z_floor`` times the per-unit base of their kind are
    dropped with a warning.
    """
    from .estimation import flat_start, power_flow
    from .errors import PowerFlowDiverged

    unknown = set(kinds) - set(KINDS)
    if unknown:
        raise InvalidConfig(f"unknown measurement kinds {sorted(unknown)}")
    adm = admittance or build_admittance(grid)
    if v_prior is None:
        try:
            v_prior = power_flow(grid, admittance=adm)
        except PowerFlowDiverged:
            logger.warning("power flow failed; predicting readings at flat voltages")
            v_prior = flat_start(grid)

    v_base = float(np.mean(np.abs(grid.v_source)))
    loads = np.abs(grid.injections())
    i_base = float(loads[loads > 0].mean()) / v_base if np.any(loads > 0) else 1.0

    rows, cols, vals, offsets, z_pred, kept, dropped = [], [], [], [], [], [], []
    for kind, bus, phase, nb in _raw_candidates(grid, kinds):
        cand = CandidateMeasurement(len(kept), kind, bus, phase, nb, 1.0, sigma_mag, sigma_ang)
        c_idx, c_val, off = _row_entries(grid, adm, cand)
        z = complex(np.dot(c_val, v_prior[c_idx]) + off)
        base = v_base if kind == "bus_voltage" else i_base
        if abs(z) < z_floor * base:
            logger.debug("dropping %s at %s: predicted |z| = %.2e below floor", kind, cand.location, abs(z))
            dropped.append(f"{kind} {cand.location}")
            continue
        rows.append(np.full(c_idx.size, len(kept)))
        cols.append(c_idx)
        vals.append(c_val)
        offsets.append(off)
        z_pred.append(z)
        kept.append(cand)

    if dropped:
        shown = ", ".join(dropped[:5]) + (", ..." if len(dropped) > 5 else "")
        logger.warning("dropped %d candidates with predicted readings below the floor: %s", len(dropped), shown)
    n_x = len(kept)
    costs = (cost_rule or CostRule()).costs(n_x)
    kept = tuple(replace(cand, cost=float(cost)) for cand, cost in zip(kept, costs))
    if n_x:
        C = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_x, adm.n), dtype=complex,
        )
    else:
        C = sp.csr_matrix((0, adm.n), dtype=complex)
    z_pred = np.array(z_pred, dtype=complex)
    factor = np.array([c.sigma_mag**2 + c.sigma_ang**2 for c in kept])
    Sigma_meas = factor * np.abs(z_pred) ** 2
    return CandidateSet(kept, C, np.array(offsets, dtype=complex), z_pred, Sigma_meas, sigma_psd)
