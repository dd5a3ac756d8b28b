"""Three-phase radial grid model, admittance assembly and grid file I/O.

The admittance matrix is the weighted graph Laplacian of the grid, with one
row/column per (bus, phase). Rows are ordered with the three source phases
first, then every non-source bus in ascending id order with its phases in
a < b < c order.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    DisconnectedGrid,
    DuplicateBusId,
    InvalidConfig,
    PhaseMismatch,
    SchemaError,
)

logger = logging.getLogger(__name__)

PHASES = "abc"
BUS_KINDS = ("source", "load", "zero_injection")
SCHEMA_VERSION = 1
PIVOT_RTOL = 1e-12


def _normalize_phases(phases: str) -> str:
    phases = str(phases).lower()
    if not phases or any(p not in PHASES for p in phases) or len(set(phases)) != len(phases):
        raise PhaseMismatch(f"invalid phase set {phases!r}")
    return "".join(p for p in PHASES if p in phases)


@dataclass(frozen=True)
class Bus:
    id: int
    phases: str
    kind: str = "load"
    load: tuple[complex, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "phases", _normalize_phases(self.phases))
        if self.kind not in BUS_KINDS:
            raise SchemaError(f"unknown bus kind {self.kind!r}", field="kind")
        load = tuple(complex(s) for s in self.load) if self.load else (0j,) * len(self.phases)
        if len(load) != len(self.phases):
            raise PhaseMismatch(
                f"bus {self.id}: {len(load)} load entries for phases {self.phases!r}"
            )
        if self.kind != "load" and any(s != 0 for s in load):
            raise SchemaError(f"bus {self.id} of kind {self.kind} must carry zero load", field="load")
        object.__setattr__(self, "load", load)

    @property
    def n_phases(self) -> int:
        return len(self.phases)


@dataclass(frozen=True, eq=False)
class Branch:
    """Line between two buses over the phases both endpoints share.

    ``admittance`` is the symmetric series admittance block (siemens or
    per-unit, consistent with the rest of the grid) indexed by the shared
    phases in a < b < c order.
    """

    from_bus: int
    to_bus: int
    admittance: np.ndarray

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.admittance, dtype=complex))
        w.setflags(write=False)
        object.__setattr__(self, "admittance", w)

    def __eq__(self, other):
        if not isinstance(other, Branch):
            return NotImplemented
        return (
            self.from_bus == other.from_bus
            and self.to_bus == other.to_bus
            and self.admittance.shape == other.admittance.shape
            and np.array_equal(self.admittance, other.admittance)
        )

    def __hash__(self):
        return hash((self.from_bus, self.to_bus, self.admittance.tobytes()))


def shared_phases(a: Bus, b: Bus) -> str:
    return "".join(p for p in PHASES if p in a.phases and p in b.phases)


@dataclass(frozen=True, eq=False)
class GridModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    v_source: np.ndarray = field(
        default_factory=lambda: np.exp(-2j * np.pi / 3 * np.arange(3))
    )

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(sorted(self.buses, key=lambda b: b.id)))
        object.__setattr__(self, "branches", tuple(self.branches))
        v = np.asarray(self.v_source, dtype=complex).reshape(-1)
        if v.shape != (3,):
            raise SchemaError("v_source must hold exactly 3 phasors", field="v_source")
        v.setflags(write=False)
        object.__setattr__(self, "v_source", v)

        seen = set()
        for bus in self.buses:
            if bus.id in seen:
                raise DuplicateBusId(f"bus id {bus.id} appears more than once", field="buses")
            seen.add(bus.id)
        sources = [b for b in self.buses if b.kind == "source"]
        if len(sources) != 1:
            raise SchemaError(f"expected exactly one source bus, found {len(sources)}", field="buses")
        if sources[0].phases != PHASES:
            raise PhaseMismatch("the source bus must carry all three phases")
        by_id = self.bus_by_id
        for k, br in enumerate(self.branches):
            if br.from_bus not in by_id or br.to_bus not in by_id:
                raise SchemaError(
                    f"branch {k} references unknown bus ({br.from_bus}, {br.to_bus})", field="branches"
                )
            if br.from_bus == br.to_bus:
                raise SchemaError(f"branch {k} is a self loop", field="branches")
            n = len(shared_phases(by_id[br.from_bus], by_id[br.to_bus]))
            if n == 0 or br.admittance.shape != (n, n):
                raise PhaseMismatch(
                    f"branch {br.from_bus}->{br.to_bus}: admittance shape {br.admittance.shape} "
                    f"does not match {n} shared phase(s)"
                )
            if not np.array_equal(br.admittance, br.admittance.T):
                raise PhaseMismatch(f"branch {br.from_bus}->{br.to_bus}: admittance block is not symmetric")

    def __eq__(self, other):
        if not isinstance(other, GridModel):
            return NotImplemented
        return (
            self.buses == other.buses
            and self.branches == other.branches
            and np.array_equal(self.v_source, other.v_source)
        )

    __hash__ = None

    @cached_property
    def bus_by_id(self) -> dict[int, Bus]:
        return {b.id: b for b in self.buses}

    @property
    def source(self) -> Bus:
        return next(b for b in self.buses if b.kind == "source")

    @property
    def non_source_buses(self) -> tuple[Bus, ...]:
        return tuple(b for b in self.buses if b.kind != "source")

    @property
    def state_dim(self) -> int:
        return sum(b.n_phases for b in self.non_source_buses)

    def neighbors(self, bus_id: int) -> list[int]:
        out = []
        for br in self.branches:
            if br.from_bus == bus_id:
                out.append(br.to_bus)
            elif br.to_bus == bus_id:
                out.append(br.from_bus)
        return out

    def branch_between(self, i: int, m: int) -> Branch | None:
        for br in self.branches:
            if {br.from_bus, br.to_bus} == {i, m}:
                return br
        return None

    def state_labels(self) -> list[tuple[int, str]]:
        return [(b.id, p) for b in self.non_source_buses for p in b.phases]

    def injections(self) -> np.ndarray:
        """Complex power injected at every state entry (loads enter negated)."""
        return -np.array([s for b in self.non_source_buses for s in b.load], dtype=complex)

    def zero_injection_mask(self) -> np.ndarray:
        return np.array(
            [b.kind == "zero_injection" for b in self.non_source_buses for _ in b.phases], dtype=bool
        )


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    """Laplacian admittance matrix with its (bus, phase) index map.

    The first three rows belong to the source phases; ``Y_LL`` and
    ``Y_Lsrc`` are the non-source/non-source and non-source/source blocks.
    """

    Y: sp.csr_matrix
    index: dict[tuple[int, str], int]

    @property
    def n(self) -> int:
        return self.Y.shape[0] - 3

    @cached_property
    def Y_LL(self) -> sp.csc_matrix:
        return self.Y[3:, 3:].tocsc()

    @cached_property
    def Y_Lsrc(self) -> np.ndarray:
        return self.Y[3:, :3].toarray()

    @cached_property
    def lu(self):
        return spla.splu(self.Y_LL)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``Y_LL v = rhs`` for one or many right-hand sides."""
        return self.lu.solve(np.asarray(rhs, dtype=complex))

    def state_index(self, bus_id: int, phase: str) -> int:
        return self.index[(bus_id, phase)] - 3

    def toarray(self) -> np.ndarray:
        return self.Y.toarray()


def build_admittance(grid: GridModel) -> AdmittanceMatrix:
    """Assemble the grid Laplacian ``Y`` and verify ``Y_LL`` is invertible."""
    index: dict[tuple[int, str], int] = {}
    src = grid.source
    for p in PHASES:
        index[(src.id, p)] = len(index)
    for bus in grid.non_source_buses:
        for p in bus.phases:
            index[(bus.id, p)] = len(index)

    rows, cols, vals = [], [], []
    by_id = grid.bus_by_id
    for br in grid.branches:
        phases = shared_phases(by_id[br.from_bus], by_id[br.to_bus])
        fi = [index[(br.from_bus, p)] for p in phases]
        ti = [index[(br.to_bus, p)] for p in phases]
        w = br.admittance
        for a in range(len(phases)):
            for c in range(len(phases)):
                v = w[a, c]
                rows += [fi[a], ti[a], fi[a], ti[a]]
                cols += [fi[c], ti[c], ti[c], fi[c]]
                vals += [v, v, -v, -v]
    size = len(index)
    Y = sp.coo_matrix((vals, (rows, cols)), shape=(size, size), dtype=complex).tocsr()
    Y.sum_duplicates()
    # duplicate summation order is unspecified; average with the transpose so Y == Y.T exactly
    Y = ((Y + Y.T) * 0.5).tocsr()
    adm = AdmittanceMatrix(Y=Y, index=index)

    if adm.n == 0:
        raise DisconnectedGrid("grid has no non-source phases")
    try:
        lu = adm.lu
    except RuntimeError as exc:  # splu raises on exact singularity
        raise DisconnectedGrid(f"Y_LL is singular: {exc}") from exc
    piv = np.abs(lu.U.diagonal())
    if not np.all(np.isfinite(piv)) or piv.min() < PIVOT_RTOL * piv.max():
        raise DisconnectedGrid(
            f"Y_LL is numerically singular (min pivot {piv.min():.3e}, max {piv.max():.3e}); "
            "some phase is not connected to the source"
        )
    return adm


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def _cplx(value, where):
    try:
        re, im = value
        return complex(float(re), float(im))
    except (TypeError, ValueError):
        raise SchemaError(f"expected [re, im] pair, got {value!r}", field=where) from None


def _pair(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def grid_to_dict(grid: GridModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "v_source": [_pair(v) for v in grid.v_source],
        "buses": [
            {"id": b.id, "phases": b.phases, "kind": b.kind, "load": [_pair(s) for s in b.load]}
            for b in grid.buses
        ],
        "branches": [
            {
                "from": br.from_bus,
                "to": br.to_bus,
                "admittance": [[_pair(v) for v in row] for row in br.admittance],
            }
            for br in grid.branches
        ],
    }


def grid_from_dict(data: dict) -> GridModel:
    if not isinstance(data, dict):
        raise SchemaError("top level must be an object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version!r}", field="schema_version")
    for key in ("buses", "branches", "v_source"):
        if key not in data:
            raise SchemaError("missing required field", field=key)

    buses = []
    for k, raw in enumerate(data["buses"]):
        where = f"buses[{k}]"
        try:
            if raw.get("shunt") not in (None, 0, [], [0, 0]):
                raise SchemaError("shunt admittances are not supported", field=f"{where}.shunt")
            load = [_cplx(s, f"{where}.load") for s in raw.get("load", [])]
            buses.append(Bus(id=int(raw["id"]), phases=raw["phases"], kind=raw.get("kind", "load"), load=load))
        except KeyError as exc:
            raise SchemaError(f"missing key {exc}", field=where) from None
        except (PhaseMismatch, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(str(exc), field=where) from None

    branches = []
    for k, raw in enumerate(data["branches"]):
        where = f"branches[{k}]"
        try:
            adm = [[_cplx(v, f"{where}.admittance") for v in row] for row in raw["admittance"]]
            branches.append(Branch(int(raw["from"]), int(raw["to"]), np.array(adm, dtype=complex)))
        except KeyError as exc:
            raise SchemaError(f"missing key {exc}", field=where) from None
        except TypeError as exc:
            raise SchemaError(str(exc), field=where) from None

    v_source = [_cplx(v, "v_source") for v in data["v_source"]]
    return GridModel(buses=tuple(buses), branches=tuple(branches), v_source=np.array(v_source))


def save_grid(grid: GridModel, path) -> None:
    """Write ``grid`` as JSON. Output is byte-stable for a given model."""
    text = json.dumps(grid_to_dict(grid), indent=1, sort_keys=False)
    Path(path).write_text(text + "\n")


def load_grid(path) -> GridModel:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: malformed JSON: {exc.msg}", line=exc.lineno) from None
    return grid_from_dict(data)


# ---------------------------------------------------------------------------
# Synthetic feeders
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeederConfig:
    """Parameters of the synthetic radial feeder generator (per-unit)."""

    v_source_magnitude: float = 1.0
    z_range: tuple[float, float] = (0.002, 0.01)  # series impedance magnitude per segment
    x_over_r_range: tuple[float, float] = (1.0, 3.0)
    mutual_fraction: float = 0.3
    total_load: float = 1.0  # sum of |S| over all load phases
    power_factor_range: tuple[float, float] = (0.85, 0.98)
    zero_injection_fraction: float = 0.2
    phase_drop_probability: float = 0.3

    def validate(self):
        lo, hi = self.z_range
        if not (0 < lo <= hi):
            raise InvalidConfig(f"z_range must be positive and ordered, got {self.z_range}")
        lo, hi = self.x_over_r_range
        if not (0 < lo <= hi):
            raise InvalidConfig(f"x_over_r_range must be positive and ordered, got {self.x_over_r_range}")
        if not (0 <= self.mutual_fraction < 1):
            raise InvalidConfig("mutual_fraction must lie in [0, 1)")
        if self.total_load < 0 or self.v_source_magnitude <= 0:
            raise InvalidConfig("total_load must be >= 0 and v_source_magnitude > 0")
        lo, hi = self.power_factor_range
        if not (0 < lo <= hi <= 1):
            raise InvalidConfig("power_factor_range must lie in (0, 1]")
        if not (0 <= self.zero_injection_fraction < 1 and 0 <= self.phase_drop_probability <= 1):
            raise InvalidConfig("fractions must lie in [0, 1)")


def _line_admittance(rng, n_phases, cfg: FeederConfig) -> np.ndarray:
    mag = rng.uniform(*cfg.z_range)
    xr = rng.uniform(*cfg.x_over_r_range)
    z_self = mag * (1 + 1j * xr) / np.hypot(1, xr)
    z = np.full((n_phases, n_phases), cfg.mutual_fraction * z_self, dtype=complex)
    np.fill_diagonal(z, z_self)
    y = np.linalg.inv(z)
    return 0.5 * (y + y.T)


def generate_feeder(n_bus: int, seed: int = 0, config: FeederConfig | None = None) -> GridModel:
    """Random radial feeder rooted at a three-phase source bus (id 0).

    Bus ``k`` attaches to a uniformly drawn earlier bus; with probability
    ``phase_drop_probability`` it keeps only a random strict subset of its
    parent's phases. Loads are scaled so their magnitudes sum to
    ``total_load``.
    """
    cfg = config or FeederConfig()
    cfg.validate()
    if n_bus < 2:
        raise InvalidConfig("n_bus must be at least 2")
    rng = np.random.default_rng(seed)

    phases = {0: PHASES}
    parent = {}
    for k in range(1, n_bus):
        p = int(rng.integers(0, k))
        parent[k] = p
        ph = phases[p]
        if len(ph) > 1 and rng.random() < cfg.phase_drop_probability:
            size = int(rng.integers(1, len(ph)))
            keep = rng.choice(len(ph), size=size, replace=False)
            ph = "".join(sorted(ph[i] for i in keep))
        phases[k] = ph

    kinds = {k: ("zero_injection" if rng.random() < cfg.zero_injection_fraction else "load") for k in range(1, n_bus)}
    if all(v != "load" for v in kinds.values()):
        kinds[n_bus - 1] = "load"

    raw_loads = {}
    for k in range(1, n_bus):
        if kinds[k] != "load":
            continue
        mags = rng.uniform(0.5, 1.5, size=len(phases[k]))
        pf = rng.uniform(*cfg.power_factor_range, size=len(phases[k]))
        raw_loads[k] = mags * (pf + 1j * np.sqrt(1 - pf**2))
    total = sum(np.abs(v).sum() for v in raw_loads.values())
    scale = cfg.total_load / total if total > 0 else 0.0

    buses = [Bus(0, PHASES, "source")]
    for k in range(1, n_bus):
        load = tuple(complex(s) for s in raw_loads[k] * scale) if k in raw_loads else ()
        buses.append(Bus(k, phases[k], kinds[k], load))
    branches = [
        Branch(parent[k], k, _line_admittance(rng, len(phases[k]), cfg)) for k in range(1, n_bus)
    ]
    v_src = cfg.v_source_magnitude * np.exp(-2j * np.pi / 3 * np.arange(3))
    return GridModel(tuple(buses), tuple(branches), v_src)
