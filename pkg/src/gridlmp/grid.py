"""Hybrid AC/DC grid model, preprocessing passes and the spanning-tree upgrade.

Buses are addressed by 0-based position everywhere inside the library.  All
electrical quantities are per unit on ``Grid.base_mva``; cost and benefit
functions take per-unit active power and return $/h.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, Union

import networkx as nx
import numpy as np

from .errors import Disconnected, IncompatibleShifts, InvalidGrid, UnknownBranch

DEFAULT_ANGLE_LIMIT = math.pi / 3
DEFAULT_LOSS_FACTOR = 0.035
DEFAULT_Q_CAP_FRACTION = 0.25


# ---------------------------------------------------------------------------
# Cost / benefit functions of active power
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Quadratic:
    """``c2 * P**2 + c1 * P + c0``."""

    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0

    def __call__(self, p):
        return (self.c2 * p + self.c1) * p + self.c0

    def slope(self, p: float) -> float:
        return 2.0 * self.c2 * p + self.c1

    def subgradient(self, p: float) -> tuple[float, float]:
        s = self.slope(p)
        return s, s

    def breakpoints(self) -> tuple[float, ...]:
        return ()

    def scaled(self, factor: float) -> "Quadratic":
        return Quadratic(self.c2 * factor, self.c1 * factor, self.c0 * factor)

    @property
    def is_convex(self) -> bool:
        return self.c2 >= 0.0

    @property
    def is_concave(self) -> bool:
        return self.c2 <= 0.0

    @property
    def is_zero(self) -> bool:
        return self.c2 == 0.0 and self.c1 == 0.0 and self.c0 == 0.0


@dataclass(frozen=True)
class PiecewiseLinear:
    """Piecewise-linear function through ``points`` = ((P0, f0), (P1, f1), ...).

    Outside the first/last breakpoint the end segments are extended.
    """

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(x), float(f)) for x, f in self.points)
        if len(pts) < 2:
            raise ValueError("piecewise-linear function needs at least two points")
        if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise ValueError("piecewise-linear breakpoints must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @property
    def xs(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def fs(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.fs) / np.diff(self.xs)

    def __call__(self, p):
        xs, fs, s = self.xs, self.fs, self.slopes
        p_arr = np.asarray(p, dtype=float)
        out = np.interp(p_arr, xs, fs)
        out = np.where(p_arr < xs[0], fs[0] + s[0] * (p_arr - xs[0]), out)
        out = np.where(p_arr > xs[-1], fs[-1] + s[-1] * (p_arr - xs[-1]), out)
        return float(out) if out.ndim == 0 else out

    def segment_slope(self, k: int) -> float:
        return float(self.slopes[k])

    def subgradient(self, p: float, tol: float = 1e-9) -> tuple[float, float]:
        """(left, right) derivative at ``p``."""
        xs, s = self.xs, self.slopes
        for k, x in enumerate(xs):
            if abs(p - x) <= tol:
                left = s[max(k - 1, 0)]
                right = s[min(k, len(s) - 1)]
                return float(left), float(right)
        k = int(np.clip(np.searchsorted(xs, p) - 1, 0, len(s) - 1))
        return float(s[k]), float(s[k])

    def breakpoints(self) -> tuple[float, ...]:
        return tuple(x for x, _ in self.points)

    def scaled(self, factor: float) -> "PiecewiseLinear":
        return PiecewiseLinear(tuple((x, f * factor) for x, f in self.points))

    @property
    def is_convex(self) -> bool:
        return bool(np.all(np.diff(self.slopes) >= -1e-12))

    @property
    def is_concave(self) -> bool:
        return bool(np.all(np.diff(self.slopes) <= 1e-12))

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.fs == 0.0))


CostFn = Union[Quadratic, PiecewiseLinear]
ZERO_FN = Quadratic()


# ---------------------------------------------------------------------------
# P-Q regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    p_min: float
    p_max: float
    q_min: float
    q_max: float

    def __post_init__(self):
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise ValueError(f"empty box {self}")

    @classmethod
    def point(cls, p: float, q: float) -> "Box":
        return cls(p, p, q, q)

    @property
    def is_singleton(self) -> bool:
        return self.p_min == self.p_max and self.q_min == self.q_max

    def envelope(self):
        """Breakpoints in P with the upper and lower Q boundary at each."""
        ps = [self.p_min] if self.p_min == self.p_max else [self.p_min, self.p_max]
        n = len(ps)
        return np.array(ps), np.full(n, self.q_max), np.full(n, self.q_min)

    def linear_constraints(self):
        """(A_eq, b_eq, A_ub, b_ub) over the pair (P, Q)."""
        a_eq, b_eq, a_ub, b_ub = [], [], [], []
        for axis, lo, hi in ((0, self.p_min, self.p_max), (1, self.q_min, self.q_max)):
            e = [0.0, 0.0]
            e[axis] = 1.0
            if lo == hi:
                a_eq.append(e)
                b_eq.append(lo)
            else:
                a_ub.append(e)
                b_ub.append(hi)
                a_ub.append([-v for v in e])
                b_ub.append(-lo)
        return _as_arrays(a_eq, b_eq, a_ub, b_ub)

    def contains(self, p: float, q: float, tol: float = 1e-9) -> bool:
        return (self.p_min - tol <= p <= self.p_max + tol
                and self.q_min - tol <= q <= self.q_max + tol)

    def scaled(self, factor: float) -> "Box":
        lo_p, hi_p = sorted((self.p_min * factor, self.p_max * factor))
        lo_q, hi_q = sorted((self.q_min * factor, self.q_max * factor))
        return Box(lo_p, hi_p, lo_q, hi_q)


@dataclass(frozen=True)
class Polygon:
    """Convex P-Q capability region given by its vertices (any order)."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        hull = _convex_hull([(float(p), float(q)) for p, q in self.vertices])
        if len(hull) < 3:
            raise ValueError("polygon region needs three non-collinear vertices")
        object.__setattr__(self, "vertices", tuple(hull))

    @property
    def p_min(self) -> float:
        return min(v[0] for v in self.vertices)

    @property
    def p_max(self) -> float:
        return max(v[0] for v in self.vertices)

    @property
    def is_singleton(self) -> bool:
        return False

    def _chains(self):
        pts = sorted(self.vertices)
        lower, upper = [], []
        for p in pts:
            while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
                lower.pop()
            lower.append(p)
        for p in reversed(pts):
            while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
                upper.pop()
            upper.append(p)
        return lower, upper[::-1]

    def envelope(self):
        lower, upper = self._chains()
        ps = np.unique([v[0] for v in self.vertices])
        q_lo = _chain_interp(ps, lower, take=min)
        q_hi = _chain_interp(ps, upper, take=max)
        return ps, q_hi, q_lo

    def linear_constraints(self):
        a_ub, b_ub = [], []
        verts = self.vertices
        for u, w in zip(verts, verts[1:] + verts[:1]):
            normal = (w[1] - u[1], -(w[0] - u[0]))
            a_ub.append(list(normal))
            b_ub.append(normal[0] * u[0] + normal[1] * u[1])
        return _as_arrays([], [], a_ub, b_ub)

    def contains(self, p: float, q: float, tol: float = 1e-9) -> bool:
        _, _, a, b = self.linear_constraints()
        scale = np.linalg.norm(a, axis=1)
        return bool(np.all(a @ np.array([p, q]) - b <= tol * scale))

    def scaled(self, factor: float) -> "Polygon":
        return Polygon(tuple((p * factor, q * factor) for p, q in self.vertices))


Region = Union[Box, Polygon]


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _convex_hull(points):
    pts = sorted(set(points))
    if len(pts) < 3:
        return pts
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _chain_interp(ps, chain, take):
    xs = [c[0] for c in chain]
    ys = [c[1] for c in chain]
    out = []
    for p in ps:
        hits = [y for x, y in zip(xs, ys) if x == p]
        out.append(take(hits) if hits else float(np.interp(p, xs, ys)))
    return np.array(out)


def _as_arrays(a_eq, b_eq, a_ub, b_ub):
    return (np.array(a_eq, dtype=float).reshape(-1, 2), np.array(b_eq, dtype=float),
            np.array(a_ub, dtype=float).reshape(-1, 2), np.array(b_ub, dtype=float))


# ---------------------------------------------------------------------------
# Network elements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Bus:
    v_min: float = 0.9
    v_max: float = 1.1
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    base_kv: float = 0.0
    label: int = 0


@dataclass(frozen=True)
class AcBranch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    i_max_from: float = 99.0
    i_max_to: float = 99.0
    drop_lo: float = -1.0
    drop_hi: float = 1.0
    ang_lo: float = -DEFAULT_ANGLE_LIMIT
    ang_hi: float = DEFAULT_ANGLE_LIMIT
    label: int = 0

    @property
    def series_admittance(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class DcBranch:
    from_bus: int
    to_bus: int
    p_min: float
    p_max: float
    loss_factor: float = DEFAULT_LOSS_FACTOR
    q_capability: float = 0.0
    label: int = 0

    @property
    def efficiency(self) -> float:
        return 1.0 - self.loss_factor


@dataclass(frozen=True)
class GenSpec:
    bus: int
    capability: Region
    cost: CostFn = ZERO_FN
    label: int = 0


@dataclass(frozen=True)
class LoadSpec:
    bus: int
    region: Region
    benefit: CostFn = ZERO_FN
    label: int = 0

    @property
    def is_fixed(self) -> bool:
        return self.region.is_singleton

    @classmethod
    def fixed(cls, bus: int, p: float, q: float = 0.0, label: int = 0) -> "LoadSpec":
        return cls(bus, Box.point(p, q), ZERO_FN, label)


@dataclass(frozen=True)
class Grid:
    buses: tuple[Bus, ...]
    ac_branches: tuple[AcBranch, ...] = ()
    dc_branches: tuple[DcBranch, ...] = ()
    generators: tuple[GenSpec, ...] = ()
    loads: tuple[LoadSpec, ...] = ()
    base_mva: float = 100.0
    reference_bus: int = 0
    name: str = ""

    def __post_init__(self):
        for attr in ("buses", "ac_branches", "dc_branches", "generators", "loads"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_ac(self) -> int:
        return len(self.ac_branches)

    @property
    def n_dc(self) -> int:
        return len(self.dc_branches)

    def ac_graph(self) -> nx.MultiGraph:
        g = nx.MultiGraph()
        g.add_nodes_from(range(self.n_buses))
        for k, br in enumerate(self.ac_branches):
            g.add_edge(br.from_bus, br.to_bus, key=k)
        return g

    def is_hybrid_architecture(self) -> bool:
        """AC subgraph is a spanning tree."""
        return self.n_ac == self.n_buses - 1 and nx.is_connected(self.ac_graph())

    def validate(self, preprocessed: bool = False) -> list[tuple[str, bool, str]]:
        """Audit the model invariants; one ``(check, passed, detail)`` per check."""
        checks: list[tuple[str, bool, str]] = []

        def add(name, bad):
            checks.append((name, not bad, "; ".join(bad)))

        n = self.n_buses
        add("base_mva positive", [] if self.base_mva > 0 else [f"base_mva={self.base_mva}"])
        add("reference bus valid", [] if 0 <= self.reference_bus < n else [str(self.reference_bus)])
        add("voltage bounds", [f"bus {i}" for i, b in enumerate(self.buses)
                               if not (0 < b.v_min <= b.v_max)])
        bad_ends = []
        for k, br in enumerate(self.ac_branches):
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                bad_ends.append(f"AC branch {br.label or k} references an unknown bus")
            elif br.from_bus == br.to_bus:
                bad_ends.append(f"AC branch {br.label or k} is a self-loop")
        for k, br in enumerate(self.dc_branches):
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                bad_ends.append(f"DC branch {br.label or k} references an unknown bus")
            elif br.from_bus == br.to_bus:
                bad_ends.append(f"DC branch {br.label or k} is a self-loop")
        add("branch endpoints", bad_ends)
        add("AC impedance", [f"AC branch {br.label or k}" for k, br in enumerate(self.ac_branches)
                             if br.r == 0 and br.x == 0])
        add("non-negative resistance", [f"AC branch {br.label or k}"
                                        for k, br in enumerate(self.ac_branches) if br.r < 0])
        add("angle ranges", [f"AC branch {br.label or k}" for k, br in enumerate(self.ac_branches)
                             if not (-math.pi / 2 < br.ang_lo <= 0 <= br.ang_hi < math.pi / 2)])
        add("voltage drop ranges", [f"AC branch {br.label or k}"
                                    for k, br in enumerate(self.ac_branches)
                                    if not (-1 <= br.drop_lo <= br.drop_hi)])
        add("current limits", [f"AC branch {br.label or k}" for k, br in enumerate(self.ac_branches)
                               if not (br.i_max_from > 0 and br.i_max_to > 0)])
        add("DC branch data", [f"DC branch {br.label or k}" for k, br in enumerate(self.dc_branches)
                               if not (br.p_min <= br.p_max and 0 <= br.loss_factor < 1
                                       and br.q_capability >= 0)])
        add("generator buses", [f"generator {g.label or k}" for k, g in enumerate(self.generators)
                                if not 0 <= g.bus < n])
        add("load buses", [f"load {d.label or k}" for k, d in enumerate(self.loads)
                           if not 0 <= d.bus < n])
        add("convex costs", [f"generator {g.label or k}" for k, g in enumerate(self.generators)
                             if not g.cost.is_convex])
        add("concave benefits", [f"load {d.label or k}" for k, d in enumerate(self.loads)
                                 if not d.benefit.is_concave])
        if preprocessed:
            add("lossy AC branches", [f"AC branch {br.label or k}"
                                      for k, br in enumerate(self.ac_branches) if br.r <= 0])
            pairs = defaultdict(list)
            for k, br in enumerate(self.ac_branches):
                pairs[frozenset((br.from_bus, br.to_bus))].append(br.label or k)
            add("no parallel AC branches", [f"branches {v}" for v in pairs.values() if len(v) > 1])
        return checks

    def check(self, preprocessed: bool = False) -> "Grid":
        failed = [f"{name}: {detail}" for name, ok, detail in self.validate(preprocessed) if not ok]
        if failed:
            raise InvalidGrid(failed)
        return self

    def generators_at(self, bus: int) -> list[GenSpec]:
        return [g for g in self.generators if g.bus == bus]

    def loads_at(self, bus: int) -> list[LoadSpec]:
        return [d for d in self.loads if d.bus == bus]


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def _flip(br: AcBranch) -> AcBranch:
    """Same physical branch with source and destination exchanged (no transformer)."""
    lo_ratio, hi_ratio = 1.0 - br.drop_hi, 1.0 - br.drop_lo
    new_lo = 1.0 - 1.0 / lo_ratio if lo_ratio > 0 else -1.0
    new_hi = 1.0 - 1.0 / hi_ratio if hi_ratio > 0 else -1.0
    return replace(br, from_bus=br.to_bus, to_bus=br.from_bus,
                   i_max_from=br.i_max_to, i_max_to=br.i_max_from,
                   drop_lo=max(new_lo, -1.0), drop_hi=max(new_hi, -1.0),
                   ang_lo=-br.ang_hi, ang_hi=-br.ang_lo)


def merge_parallel_branches(grid: Grid) -> Grid:
    """Replace every group of (anti-)parallel AC branches by one equivalent branch.

    Tap ratios within a group are raised to the group maximum first; phase
    shifts must agree.
    """
    groups: dict[frozenset, list[int]] = defaultdict(list)
    for k, br in enumerate(grid.ac_branches):
        groups[frozenset((br.from_bus, br.to_bus))].append(k)
    if all(len(g) == 1 for g in groups.values()):
        return grid

    merged: dict[int, AcBranch] = {}
    dropped: set[int] = set()
    for members in groups.values():
        if len(members) == 1:
            continue
        first = grid.ac_branches[members[0]]
        aligned = []
        for k in members:
            br = grid.ac_branches[k]
            if br.from_bus != first.from_bus:
                if br.tap != 1.0 or br.shift != 0.0:
                    raise IncompatibleShifts(
                        f"anti-parallel transformer {br.label} cannot be merged with {first.label}")
                br = _flip(br)
            aligned.append(br)
        if len({br.shift for br in aligned}) > 1:
            raise IncompatibleShifts(
                f"phase shifts differ among parallel branches {[b.label for b in aligned]}")
        tap = max(br.tap for br in aligned)
        z = 1.0 / sum(br.series_admittance for br in aligned)
        merged[members[0]] = replace(
            first,
            r=z.real, x=z.imag, b=sum(br.b for br in aligned), tap=tap,
            i_max_from=sum(br.i_max_from for br in aligned),
            i_max_to=sum(br.i_max_to for br in aligned),
            drop_lo=max(br.drop_lo for br in aligned),
            drop_hi=min(br.drop_hi for br in aligned),
            ang_lo=max(br.ang_lo for br in aligned),
            ang_hi=min(br.ang_hi for br in aligned),
            label=min(br.label for br in aligned),
        )
        dropped.update(members[1:])

    branches = [merged.get(k, br) for k, br in enumerate(grid.ac_branches) if k not in dropped]
    return replace(grid, ac_branches=tuple(branches))


def enforce_min_resistance(grid: Grid, r_min: float = 1e-5) -> tuple[Grid, int]:
    """Raise every series resistance below ``r_min`` to ``r_min``.

    Returns the new grid and the number of modified branches.
    """
    if r_min <= 0:
        raise ValueError("r_min must be positive")
    count = 0
    branches = []
    for br in grid.ac_branches:
        if br.r < r_min:
            br = replace(br, r=r_min)
            count += 1
        branches.append(br)
    return replace(grid, ac_branches=tuple(branches)), count


def scale_branch_rating(grid: Grid, branch_ids: Iterable[int], factor: float) -> Grid:
    """Multiply the current limits of the AC branches whose ``label`` is listed."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    ids = set(branch_ids)
    known = {br.label for br in grid.ac_branches}
    for bid in ids:
        if bid not in known:
            raise UnknownBranch(bid)
    if not ids or factor == 1.0:
        return grid
    branches = tuple(
        replace(br, i_max_from=br.i_max_from * factor, i_max_to=br.i_max_to * factor)
        if br.label in ids else br
        for br in grid.ac_branches
    )
    return replace(grid, ac_branches=branches)


def minimum_spanning_tree(grid: Grid) -> list[int]:
    """Indices of the AC branches in the minimum spanning tree (weight = r).

    Ties are broken by branch index: edges get their rank in the
    (r, index) order as weight, which makes the tree unique.
    """
    if grid.n_buses == 0:
        return []
    order = sorted(range(grid.n_ac), key=lambda k: (grid.ac_branches[k].r, k))
    g = nx.MultiGraph()
    g.add_nodes_from(range(grid.n_buses))
    for rank, k in enumerate(order):
        br = grid.ac_branches[k]
        g.add_edge(br.from_bus, br.to_bus, key=k, weight=rank)
    if not nx.is_connected(g):
        raise Disconnected("AC subgraph is not connected")
    tree = nx.minimum_spanning_edges(g, algorithm="kruskal", weight="weight", keys=True, data=False)
    return sorted(k for _, _, k in tree)


def upgrade_to_hybrid(grid: Grid, loss_factor: float = DEFAULT_LOSS_FACTOR,
                      q_cap_fraction: float = DEFAULT_Q_CAP_FRACTION) -> Grid:
    """Convert every AC branch outside the minimum spanning tree into an HVDC branch.

    The DC capacity equals the AC current limit at 1.0 p.u. voltage and is
    usable in both directions.
    """
    keep = set(minimum_spanning_tree(grid))
    ac, dc = [], list(grid.dc_branches)
    for k, br in enumerate(grid.ac_branches):
        if k in keep:
            ac.append(br)
            continue
        cap = 1.0 * br.i_max_from
        dc.append(DcBranch(br.from_bus, br.to_bus, p_min=-cap, p_max=cap,
                           loss_factor=loss_factor, q_capability=q_cap_fraction * cap,
                           label=br.label))
    return replace(grid, ac_branches=tuple(ac), dc_branches=tuple(dc))


# ---------------------------------------------------------------------------
# Convenience constructors and scaling
# ---------------------------------------------------------------------------

def scale_loads(grid: Grid, factors: Union[float, Sequence[float]]) -> Grid:
    """Scale each bus's loads by ``factors[bus]`` (or one common factor)."""
    if np.isscalar(factors):
        factors = [float(factors)] * grid.n_buses
    loads = tuple(replace(d, region=d.region.scaled(factors[d.bus])) for d in grid.loads)
    return replace(grid, loads=loads)


def scale_costs(grid: Grid, factors: Union[float, Sequence[float]]) -> Grid:
    """Scale each generator's cost function pointwise by ``factors[gen]``."""
    if np.isscalar(factors):
        factors = [float(factors)] * len(grid.generators)
    gens = tuple(replace(g, cost=g.cost.scaled(f)) for g, f in zip(grid.generators, factors))
    return replace(grid, generators=gens)


def scale_objective(grid: Grid, factor: float) -> Grid:
    """Scale every cost and benefit function by ``factor``."""
    grid = scale_costs(grid, factor)
    loads = tuple(replace(d, benefit=d.benefit.scaled(factor)) for d in grid.loads)
    return replace(grid, loads=loads)


def total_fixed_load(grid: Grid) -> float:
    return sum(d.region.p_min for d in grid.loads if d.is_fixed)


def total_capacity(grid: Grid) -> float:
    return sum(g.capability.p_max for g in grid.generators)
