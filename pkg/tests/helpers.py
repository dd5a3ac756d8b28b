import numpy as np

from pmuopt.covariance import PlacementModel
from pmuopt.estimation import make_prior
from pmuopt.grid import Branch, Bus, GridModel, generate_feeder
from pmuopt.measurements import CostRule, enumerate_candidates


def two_bus_grid(w=complex(2.0, -6.0), load=complex(0.1, 0.05), phase="a"):
    """Three-phase source feeding one single-phase load bus."""
    buses = (Bus(0, "abc", "source"), Bus(1, phase, "load", (load,)))
    return GridModel(buses, (Branch(0, 1, np.array([[w]])),))


def random_model(n_bus, seed, n_cand=None, cost_rule=None):
    """Generated feeder, its linearized prior and (optionally a random subset of) the candidates."""
    grid = generate_feeder(n_bus, seed=seed)
    prior = make_prior(grid)
    cands = enumerate_candidates(grid, cost_rule or CostRule("normal", seed=seed), prior.V_prior)
    if n_cand is not None and n_cand < cands.n_x:
        rng = np.random.default_rng(seed)
        cands = cands.subset(np.sort(rng.choice(cands.n_x, n_cand, replace=False)))
    return grid, prior, cands, PlacementModel(prior, cands)


def rel_fro(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def bound_tol(ref, tol=1e-9):
    """Absolute slack ``tol`` tightened to relative for metric values below one."""
    return tol * min(1.0, abs(ref))


def toy_model(sigma_prior, C, meas_var, costs=None):
    """PlacementModel over a hand-written prior and measurement rows."""
    import scipy.sparse as sp

    from pmuopt.estimation import PriorState
    from pmuopt.measurements import CandidateMeasurement, CandidateSet

    sigma_prior = np.atleast_2d(np.asarray(sigma_prior, dtype=complex))
    C = np.atleast_2d(np.asarray(C, dtype=complex))
    n_x = C.shape[0]
    costs = np.ones(n_x) if costs is None else np.asarray(costs, dtype=float)
    cands = tuple(CandidateMeasurement(i, "bus_voltage", 1, "a", cost=float(costs[i])) for i in range(n_x))
    cset = CandidateSet(
        cands, sp.csr_matrix(C), np.zeros(n_x, complex), np.ones(n_x, complex),
        np.asarray(meas_var, dtype=float) * np.ones(n_x),
    )
    prior = PriorState(np.ones(sigma_prior.shape[0], complex), sigma_prior)
    return PlacementModel(prior, cset)
