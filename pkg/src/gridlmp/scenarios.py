"""Seeded perturbation ensembles and uniform-load loadability sweeps."""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import conic
from .errors import BaseInfeasible
from .grid import Grid, scale_costs, scale_loads
from .pricing import price
from .socr import solve_socr


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int = 0
    n_scenarios: int = 100
    load_scale_range: tuple = (0.25, 1.25)
    cost_scale_range: tuple = (0.5, 2.0)

    def __post_init__(self):
        if self.n_scenarios < 1:
            raise ValueError("n_scenarios must be at least 1")
        for lo, hi in (self.load_scale_range, self.cost_scale_range):
            if not (0 < lo <= hi):
                raise ValueError(f"scale range ({lo}, {hi}) must be positive and ordered")


def scenario_factors(grid: Grid, spec: ScenarioSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus load factors and per-generator cost factors of one scenario.

    Each scenario draws from its own PCG64 stream seeded by ``(seed, index)``,
    so results do not depend on which other scenarios were run.
    """
    if not 0 <= index < spec.n_scenarios:
        raise IndexError(f"scenario {index} outside 0..{spec.n_scenarios - 1}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, index])))
    lf = rng.uniform(*spec.load_scale_range, size=grid.n_buses)
    cf = rng.uniform(*spec.cost_scale_range, size=len(grid.generators))
    return lf, cf


def apply_factors(grid: Grid, load_factors, cost_factors) -> Grid:
    return scale_costs(scale_loads(grid, list(load_factors)), list(cost_factors))


def perturb(grid: Grid, spec: ScenarioSpec, index: int) -> Grid:
    lf, cf = scenario_factors(grid, spec, index)
    return apply_factors(grid, lf, cf)


@dataclass
class ScenarioRecord:
    index: int
    status: str
    exact: bool = False
    kappa_mean: float = math.nan
    kappa_max: float = math.nan
    objective: float = math.nan
    error: str = ""


@dataclass
class BatchResult:
    seed: int
    records: list = field(default_factory=list)

    @property
    def exactness_rate(self) -> float:
        if not self.records:
            return math.nan
        return sum(r.exact for r in self.records) / len(self.records)

    def kappa_max_values(self) -> np.ndarray:
        return np.array([r.kappa_max for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scenario", "kappa", "kappa_max", "exact", "status", "objective"])
        for r in self.records:
            w.writerow([r.index, repr(r.kappa_mean), repr(r.kappa_max), int(r.exact),
                        r.status, repr(r.objective)])
        return buf.getvalue()


def _thread_count(requested: Optional[int], jobs: int) -> int:
    if requested is None:
        env = os.environ.get("GRIDLMP_THREADS")
        requested = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(int(requested), jobs))


def run_scenario(grid: Grid, spec: ScenarioSpec, index: int,
                 tol: float = conic.DEFAULT_TOL) -> ScenarioRecord:
    try:
        rep = price(perturb(grid, spec, index), tol=tol)
    except Exception as exc:  # recorded, never fatal for the batch
        return ScenarioRecord(index, "error", error=f"{type(exc).__name__}: {exc}")
    return ScenarioRecord(index, rep.status, rep.exact, rep.kappa_mean, rep.kappa_max,
                          rep.objective)


def run_batch(grid: Grid, spec: ScenarioSpec, threads: Optional[int] = None,
              tol: float = conic.DEFAULT_TOL) -> BatchResult:
    """Solve and certify every scenario; records are ordered by scenario index."""
    idx = range(spec.n_scenarios)
    workers = _thread_count(threads, spec.n_scenarios)
    if workers == 1:
        records = [run_scenario(grid, spec, i, tol) for i in idx]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda i: run_scenario(grid, spec, i, tol), idx))
    return BatchResult(seed=spec.seed, records=records)


# ---------------------------------------------------------------------------
# Loadability
# ---------------------------------------------------------------------------

@dataclass
class SweepPoint:
    scale: float
    feasible: bool
    status: str
    lmp_min: float = math.nan
    lmp_max: float = math.nan


@dataclass
class SweepResult:
    max_scale: float
    infeasible_scale: float
    points: list = field(default_factory=list)

    @property
    def bracket(self) -> float:
        return self.infeasible_scale - self.max_scale

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scale", "feasible", "status", "lmp_min", "lmp_max"])
        for p in self.points:
            w.writerow([repr(p.scale), int(p.feasible), p.status, repr(p.lmp_min), repr(p.lmp_max)])
        return buf.getvalue()


def _probe(grid: Grid, scale: float, tol: float) -> SweepPoint:
    sol = solve_socr(scale_loads(grid, scale), tol=tol, check=False)
    if not sol.optimal:
        return SweepPoint(scale, False, sol.status)
    lmp = sol.lmp[:, 0]
    return SweepPoint(scale, True, sol.status, float(lmp.min()), float(lmp.max()))


def loadability_sweep(grid: Grid, step: float = 0.01, max_iter: int = 60,
                      tol: float = conic.DEFAULT_TOL) -> SweepResult:
    """Largest uniform load scale with a solvable relaxation, bracketed to ``step``.

    Any non-optimal solve (infeasible or numerical failure) counts as the
    infeasible side of the bracket.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    points = [_probe(grid, 1.0, tol)]
    if not points[0].feasible:
        raise BaseInfeasible(f"base case is {points[0].status}")
    lo, hi = 1.0, None
    for _ in range(max_iter):
        p = _probe(grid, 2.0 * lo, tol)
        points.append(p)
        if not p.feasible:
            hi = p.scale
            break
        lo = p.scale
    if hi is None:
        return SweepResult(lo, math.inf, points)
    for _ in range(max_iter):
        if hi - lo <= step:
            break
        p = _probe(grid, 0.5 * (lo + hi), tol)
        points.append(p)
        if p.feasible:
            lo = p.scale
        else:
            hi = p.scale
    return SweepResult(lo, hi, points)
