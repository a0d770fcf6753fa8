"""Command-line front end.

Exit codes: 0 success (for ``price``: prices certified exact), 1 input or
validation error, 2 relaxation inexact, 3 infeasible, 4 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from .casefile import emit_json, load_grid
from .conic import DEFAULT_TOL
from .dcopf import ac_mismatch, solve_dcopf
from .errors import BaseInfeasible, GridLmpError, Infeasible
from .grid import (DEFAULT_LOSS_FACTOR, DEFAULT_Q_CAP_FRACTION, Grid, enforce_min_resistance,
                   merge_parallel_branches, upgrade_to_hybrid)
from .pricing import EXACT_TOL, MARGIN_REL_TOL, price
from .scenarios import ScenarioSpec, loadability_sweep, run_batch

EXIT_OK, EXIT_INPUT, EXIT_INEXACT, EXIT_INFEASIBLE, EXIT_SOLVER = 0, 1, 2, 3, 4


def _positive(text: str) -> float:
    val = float(text)
    if not val > 0:
        raise argparse.ArgumentTypeError(f"{text} must be positive")
    return val


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--in", dest="input", required=True, help="grid file (.m or .json)")
    common.add_argument("--format", choices=("auto", "matpower", "json"), default="auto")
    common.add_argument("--out", default=None, help="directory for output files")
    common.add_argument("--tol", type=_positive, default=DEFAULT_TOL, help="solver residual tolerance")
    common.add_argument("--exact-tol", type=_positive, default=EXACT_TOL,
                        help="largest relaxation error accepted as exact")
    common.add_argument("--margin-tol", type=_positive, default=MARGIN_REL_TOL,
                        help="relative threshold for a vanishing subspace margin")

    p = argparse.ArgumentParser(prog="gridlmp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("validate", parents=[common], help="parse and audit a grid")

    up = sub.add_parser("upgrade", parents=[common], help="convert non-tree AC branches to HVDC")
    up.add_argument("--loss-factor", type=float, default=DEFAULT_LOSS_FACTOR)
    up.add_argument("--q-cap-fraction", type=float, default=DEFAULT_Q_CAP_FRACTION)

    sub.add_parser("price", parents=[common], help="solve the relaxation and certify LMPs")
    sub.add_parser("dcopf", parents=[common], help="DC OPF prices")

    pert = sub.add_parser("perturb", parents=[common], help="seeded load and cost scenarios")
    pert.add_argument("--seed", type=int, default=0)
    pert.add_argument("-n", "--n-scenarios", type=int, default=100)
    pert.add_argument("--load-range", type=_positive, nargs=2, default=(0.25, 1.25))
    pert.add_argument("--cost-range", type=_positive, nargs=2, default=(0.5, 2.0))
    pert.add_argument("--threads", type=int, default=None)

    sw = sub.add_parser("sweep", parents=[common], help="uniform load scaling until infeasible")
    sw.add_argument("--step", type=_positive, default=0.01)
    sw.add_argument("--max-iter", type=int, default=60)
    return p


def _prepare(grid: Grid) -> tuple[Grid, dict]:
    """Merge parallel AC branches and give lossless lines a resistance floor."""
    n0 = grid.n_ac
    grid = merge_parallel_branches(grid)
    grid, raised = enforce_min_resistance(grid)
    return grid, {"merged_branches": n0 - grid.n_ac, "raised_resistances": raised}


def _write(out_dir, name: str, text: str) -> None:
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, indent=1, sort_keys=True))


def cmd_validate(args) -> int:
    grid = load_grid(args.input, args.format)
    failed = False
    for name, ok, detail in grid.validate():
        print(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
        failed |= not ok
    return EXIT_INPUT if failed else EXIT_OK


def cmd_upgrade(args) -> int:
    grid, prep = _prepare(load_grid(args.input, args.format))
    hybrid = upgrade_to_hybrid(grid, args.loss_factor, args.q_cap_fraction)
    converted = hybrid.n_dc - grid.n_dc
    summary = dict(prep, converted=converted,
                   fraction=converted / grid.n_ac if grid.n_ac else 0.0,
                   total_dc_capacity_mw=sum(b.p_max for b in hybrid.dc_branches) * grid.base_mva,
                   ac_branches=hybrid.n_ac, dc_branches=hybrid.n_dc)
    _write(args.out, "hybrid.json", emit_json(hybrid))
    _emit(summary)
    return EXIT_OK


def cmd_price(args) -> int:
    grid, prep = _prepare(load_grid(args.input, args.format))
    rep = price(grid, tol=args.tol, exact_tol=args.exact_tol, margin_rel_tol=args.margin_tol)
    _write(args.out, "report.json", rep.to_json())
    if rep.status == "optimal":
        _write(args.out, "lmp.csv", rep.to_csv())
    summary = dict(prep, status=rep.status, exact=rep.exact, kappa_mean=rep.kappa_mean,
                   kappa_max=rep.kappa_max, pathological=rep.pathological,
                   objective=rep.objective)
    if rep.lmp_p is not None:
        summary["lmp_min"] = float(np.min(rep.lmp_p))
        summary["lmp_max"] = float(np.max(rep.lmp_p))
    _emit({k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in summary.items()})
    if rep.status == "infeasible":
        return EXIT_INFEASIBLE
    if rep.status != "optimal":
        return EXIT_SOLVER
    return EXIT_OK if rep.exact else EXIT_INEXACT


def cmd_dcopf(args) -> int:
    grid, prep = _prepare(load_grid(args.input, args.format))
    try:
        sol = solve_dcopf(grid, tol=args.tol)
    except Infeasible as exc:
        _emit(dict(prep, status="infeasible", message=str(exc)))
        return EXIT_INFEASIBLE
    if not sol.optimal:
        _emit(dict(prep, status=sol.status))
        return EXIT_SOLVER
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bus_id", "lmp_p", "theta"])
    for k, bus in enumerate(grid.buses):
        w.writerow([bus.label or k + 1, repr(float(sol.lmp[k])), repr(float(sol.theta[k]))])
    _write(args.out, "dcopf.csv", buf.getvalue())
    _, slack = ac_mismatch(grid, sol)
    _emit(dict(prep, status=sol.status, objective=sol.objective,
               lmp=[float(x) for x in sol.lmp], balance=sol.residuals["balance"],
               ac_slack_mw=slack))
    return EXIT_OK


def cmd_perturb(args) -> int:
    grid, prep = _prepare(load_grid(args.input, args.format))
    spec = ScenarioSpec(seed=args.seed, n_scenarios=args.n_scenarios,
                        load_scale_range=tuple(args.load_range),
                        cost_scale_range=tuple(args.cost_range))
    res = run_batch(grid, spec, threads=args.threads, tol=args.tol)
    text = res.to_csv()
    _write(args.out, "scenarios.csv", text)
    if args.out is None:
        sys.stdout.write(text)
    _emit(dict(prep, seed=args.seed, scenarios=spec.n_scenarios,
               exactness_rate=res.exactness_rate))
    return EXIT_OK


def cmd_sweep(args) -> int:
    grid, prep = _prepare(load_grid(args.input, args.format))
    try:
        res = loadability_sweep(grid, step=args.step, max_iter=args.max_iter, tol=args.tol)
    except BaseInfeasible as exc:
        _emit(dict(prep, status="infeasible", message=str(exc)))
        return EXIT_INFEASIBLE
    _write(args.out, "sweep.csv", res.to_csv())
    _emit(dict(prep, max_feasible_scale=res.max_scale,
               first_infeasible_scale=None if not np.isfinite(res.infeasible_scale)
               else res.infeasible_scale,
               bracket=None if not np.isfinite(res.bracket) else res.bracket))
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "upgrade": cmd_upgrade, "price": cmd_price,
            "dcopf": cmd_dcopf, "perturb": cmd_perturb, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (GridLmpError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
