"""Command-line entry point: ``pmuopt <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .covariance import Metric, PlacementModel, metric_value
from .errors import InvalidConfig, PMUOptError
from .estimation import SIGMA_VIRT, make_prior, validate_posterior_covariance
from .grid import generate_feeder, load_grid, save_grid
from .measurements import KINDS, SIGMA_ANG, SIGMA_MAG, CostRule, enumerate_candidates
from .placement import (
    DescentConfig,
    compute_bounds,
    greedy_cost_effective,
    projected_subgradient,
    reports_to_csv,
    round_convex,
)

class UsageError(Exception):
    pass


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _metric_list(text):
    try:
        metrics = [Metric.parse(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    if not metrics:
        raise argparse.ArgumentTypeError("at least one metric is required")
    return metrics


def _add_model_args(p):
    p.add_argument("--grid", required=True, help="grid file written by gen-grid")
    p.add_argument("--sigma-psd", type=float, default=0.5, help="relative std of load pseudo-measurements")
    p.add_argument("--sigma-mag", type=float, default=SIGMA_MAG)
    p.add_argument("--sigma-ang", type=float, default=SIGMA_ANG)
    p.add_argument("--sigma-virt", type=float, default=SIGMA_VIRT, help="relative std of zero-injection constraints")
    p.add_argument("--prior-method", choices=("linearization", "monte_carlo"), default="linearization")
    p.add_argument("--prior-samples", type=int, default=10_000)
    p.add_argument("--prior-seed", type=int, default=0)
    p.add_argument("--jacobian", choices=("fd", "implicit"), default="implicit",
                   help="power-flow sensitivity used by the linearized prior")
    p.add_argument("--kinds", default=",".join(KINDS), help="candidate kinds to enumerate")
    p.add_argument("--cost-rule", choices=("fixed", "normal"), default="fixed")
    p.add_argument("--cost-value", type=float, default=1.0, help="cost under the fixed rule")
    p.add_argument("--cost-mean", type=float, default=1.0)
    p.add_argument("--cost-std", type=float, default=0.1)
    p.add_argument("--cost-seed", type=int, default=0)


def _add_descent_args(p):
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--rel-tol", type=float, default=1e-6)
    p.add_argument("--greedy-variant", choices=("as_written", "improvement_ratio"), default="as_written")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmuopt", description="Budgeted PMU placement with certified bounds.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-grid", help="generate a random radial three-phase feeder")
    p.add_argument("--buses", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("candidates", help="list candidate measurements as CSV")
    _add_model_args(p)
    p.add_argument("-o", "--output", help="write to a file instead of stdout")

    p = sub.add_parser("bounds", help="lower and upper bounds for each (metric, budget) pair")
    _add_model_args(p)
    _add_descent_args(p)
    p.add_argument("--metric", type=_metric_list, default=[Metric.A])
    p.add_argument("--budgets", type=_float_list, required=True)
    p.add_argument("--output-dir", default=".")
    p.add_argument("--no-timing", action="store_true", help="leave the seconds column empty")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent (metric, budget) pairs")

    p = sub.add_parser("place", help="select sensors for one budget")
    _add_model_args(p)
    _add_descent_args(p)
    p.add_argument("--metric", type=_metric_list, default=[Metric.A])
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--method", choices=("greedy", "convex-round"), default="greedy")

    p = sub.add_parser("validate", help="Monte-Carlo check of the predicted posterior covariance")
    _add_model_args(p)
    p.add_argument("--sensors", type=_int_list, required=True, help="candidate ids, comma-separated")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _load_model(args):
    if not os.path.exists(args.grid):
        raise FileNotFoundError(f"grid file not found: {args.grid}")
    grid = load_grid(args.grid)
    kinds = tuple(k.strip() for k in args.kinds.split(",") if k.strip())
    if args.cost_rule == "fixed":
        rule = CostRule("fixed", value=args.cost_value)
    else:
        rule = CostRule("normal", mean=args.cost_mean, std=args.cost_std, seed=args.cost_seed)
    prior = make_prior(
        grid, method=args.prior_method, sigma_psd=args.sigma_psd, n_samples=args.prior_samples,
        seed=args.prior_seed, sigma_virt=args.sigma_virt, jacobian=args.jacobian,
    )
    cands = enumerate_candidates(
        grid, rule, prior.V_prior, kinds, args.sigma_mag, args.sigma_ang, args.sigma_psd,
    )
    return grid, prior, cands


def _descent_config(args):
    try:
        return DescentConfig(alpha=args.alpha, max_iter=args.max_iter, rel_tol=args.rel_tol)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_gen_grid(args, out):
    try:
        grid = generate_feeder(args.buses, seed=args.seed)
    except InvalidConfig as exc:
        raise UsageError(str(exc)) from None
    save_grid(grid, args.output)
    print(f"wrote {args.output}: {len(grid.buses)} buses, {grid.state_dim} phase states", file=out)


def cmd_candidates(args, out):
    _, _, cands = _load_model(args)
    text = cands.to_csv()
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
        print(f"wrote {cands.n_x} candidates to {args.output}", file=out)
    else:
        out.write(text)


def cmd_bounds(args, out):
    if any(b <= 0 for b in args.budgets) or not args.budgets:
        raise UsageError("budgets must be positive")
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    config = _descent_config(args)
    _, prior, cands = _load_model(args)
    model = PlacementModel(prior, cands)
    pairs = [(metric, b) for metric in args.metric for b in args.budgets]
    if args.jobs > 1 and len(pairs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(compute_bounds, m, model, b, config, args.greedy_variant) for m, b in pairs]
            reports = [f.result() for f in futures]
    else:
        reports = [compute_bounds(m, model, b, config, args.greedy_variant) for m, b in pairs]

    os.makedirs(args.output_dir, exist_ok=True)
    path = os.path.join(args.output_dir, "bounds.csv")
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a") as fh:
        fh.write(reports_to_csv(reports, header=fresh, timing=not args.no_timing))

    print(f"{'metric':<6} {'budget':>8} {'f_lb':>14} {'f_greedy':>14} {'f_feas':>14} {'gap':>12}", file=out)
    for r in reports:
        print(
            f"{r.metric:<6} {r.budget:>8.3f} {r.f_lb:>14.6e} {r.f_greedy:>14.6e} {r.f_feas:>14.6e} {r.gap:>12.4e}",
            file=out,
        )
    bad = [(r.metric, r.budget, v) for r in reports for v in r.violations()]
    for metric, b, v in bad:
        print(f"invariant violated ({metric}, {b:g}): {v}", file=sys.stderr)
    print(f"wrote {len(reports)} rows to {path}", file=out)
    return 1 if bad else 0


def cmd_place(args, out):
    if args.budget < 0:
        raise UsageError("budget must be nonnegative")
    config = _descent_config(args)
    _, prior, cands = _load_model(args)
    model = PlacementModel(prior, cands)
    metric = args.metric[0]
    if args.method == "greedy":
        placement = greedy_cost_effective(metric, model, args.budget, args.greedy_variant).placement
    else:
        conv = projected_subgradient(metric, model, args.budget, config)
        placement = round_convex(conv.x_best, model.costs, args.budget)
    value = metric_value(model.posterior(placement.x), metric)

    print("id\tkind\tlocation\tcost", file=out)
    for i in placement.selected:
        cand = cands.candidates[i]
        print(f"{cand.id}\t{cand.kind}\t{cand.location}\t{cand.cost:.6g}", file=out)
    print(f"# total_cost\t{placement.cost:.6g}", file=out)
    print(f"# f_{metric.value}\t{value:.12e}", file=out)


def cmd_validate(args, out):
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    grid, prior, cands = _load_model(args)
    bad = [i for i in args.sensors if not 0 <= i < cands.n_x]
    if bad:
        raise UsageError(f"unknown candidate ids {bad} (valid: 0..{cands.n_x - 1})")
    report = validate_posterior_covariance(
        grid, args.sensors, args.trials, seed=args.seed, candidates=cands, prior=prior,
        sigma_psd=args.sigma_psd, sigma_virt=args.sigma_virt,
    )
    out.write(report.to_text())


COMMANDS = {
    "gen-grid": cmd_gen_grid,
    "candidates": cmd_candidates,
    "bounds": cmd_bounds,
    "place": cmd_place,
    "validate": cmd_validate,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args, out) or 0
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (PMUOptError, OSError, np.linalg.LinAlgError) as exc:
        print(f"pmuopt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
