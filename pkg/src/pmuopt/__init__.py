"""Budget-constrained PMU placement for three-phase distribution feeders."""
from .covariance import Metric, PlacementModel, PosteriorCovariance, metric_gradient, metric_value, posterior_cov, rank_one_add
from .estimation import (
    PriorState,
    make_prior,
    posterior_covariance_joseph,
    posterior_update,
    power_flow,
    prior_covariance,
    validate_posterior_covariance,
)
from .grid import GridModel, build_admittance, generate_feeder, load_grid, save_grid
from .measurements import CandidateSet, CostRule, enumerate_candidates
from .placement import (
    BoundsReport,
    DescentConfig,
    brute_force_opt,
    compute_bounds,
    greedy_cost_effective,
    projected_subgradient,
    round_convex,
)
from .projection import BoxSimplex, kkt_residuals, project, project_oracle

__version__ = "0.1.0"
