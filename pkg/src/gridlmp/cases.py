"""Small hand-built grids used by the tests, the acceptance suite and the CLI demos."""

from __future__ import annotations

import math
from dataclasses import replace
from importlib import resources

import numpy as np

from .casefile import parse_matpower, to_grid
from .grid import (AcBranch, Box, Bus, DcBranch, GenSpec, Grid, LoadSpec, Quadratic,
                   enforce_min_resistance, scale_loads, upgrade_to_hybrid)

BASE = 100.0


def linear_cost(dollars_per_mwh: float, base: float = BASE) -> Quadratic:
    """Linear cost given in $/MWh, expressed per p.u. of power."""
    return Quadratic(0.0, dollars_per_mwh * base, 0.0)


def two_bus(load: float = 1.5, limit: float = 99.0, r: float = 0.0, x: float = 0.1,
            cheap: float = 20.0, expensive: float = 50.0, q_cap: float = 5.0) -> Grid:
    """Cheap unit at bus 1, expensive unit and a fixed load at bus 2 (0-based 0 and 1)."""
    buses = (Bus(0.95, 1.05, label=1), Bus(0.95, 1.05, label=2))
    br = AcBranch(0, 1, r=r, x=x, i_max_from=limit, i_max_to=limit, label=1)
    gens = (GenSpec(0, Box(0.0, 5.0, -q_cap, q_cap), linear_cost(cheap), label=1),
            GenSpec(1, Box(0.0, 5.0, -q_cap, q_cap), linear_cost(expensive), label=2))
    loads = (LoadSpec.fixed(1, load, 0.0, label=1),)
    return Grid(buses, (br,), (), gens, loads, BASE, 0, "two_bus")


def congested_two_bus() -> Grid:
    """Lossless line rated 1 p.u. feeding a 1.5 p.u. load; DC prices are (20, 50)."""
    return two_bus(load=1.5, limit=1.0)


def symmetric_two_bus(load: float = 0.5) -> Grid:
    """Identical units and identical loads at both ends of a lossless line."""
    buses = (Bus(0.95, 1.05, label=1), Bus(0.95, 1.05, label=2))
    br = AcBranch(0, 1, r=0.0, x=0.1, label=1)
    cost = Quadratic(500.0, 2000.0, 0.0)
    gens = tuple(GenSpec(k, Box(0.0, 2.0, -2.0, 2.0), cost, label=k + 1) for k in range(2))
    loads = tuple(LoadSpec.fixed(k, load, 0.0, label=k + 1) for k in range(2))
    return Grid(buses, (br,), (), gens, loads, BASE, 0, "symmetric_two_bus")


def two_bus_hybrid(load: float = 1.0, dc_cap: float = 0.6, r: float = 0.02) -> Grid:
    """Two buses joined by an AC line and a parallel HVDC link."""
    g = two_bus(load=load, limit=0.8, r=r, cheap=20.0, expensive=50.0)
    dc = DcBranch(0, 1, -dc_cap, dc_cap, loss_factor=0.035, q_capability=0.25 * dc_cap, label=2)
    return replace(g, dc_branches=(dc,), name="two_bus_hybrid")


def triangle(limit: float = 99.0, load: float = 1.2, shunt_b: float = 0.0) -> Grid:
    """Meshed three-bus grid with resistances 0.01, 0.02 and 0.03."""
    buses = tuple(Bus(0.95, 1.05, label=k + 1) for k in range(3))
    brs = (AcBranch(0, 1, 0.01, 0.08, shunt_b, i_max_from=limit, i_max_to=limit, label=1),
           AcBranch(1, 2, 0.02, 0.10, shunt_b, i_max_from=limit, i_max_to=limit, label=2),
           AcBranch(0, 2, 0.03, 0.12, shunt_b, i_max_from=limit, i_max_to=limit, label=3))
    gens = (GenSpec(0, Box(0.0, 3.0, -2.0, 2.0), Quadratic(100.0, 1500.0, 0.0), label=1),
            GenSpec(1, Box(0.0, 3.0, -2.0, 2.0), Quadratic(200.0, 3500.0, 0.0), label=2))
    loads = (LoadSpec.fixed(2, load, 0.3 * load, label=1),)
    return Grid(buses, brs, (), gens, loads, BASE, 0, "triangle")


def tight_triangle() -> Grid:
    """Triangle whose binding limits make the branch-wise relaxation inexact."""
    g = triangle(load=1.2)
    brs = list(g.ac_branches)
    brs[0] = replace(brs[0], i_max_from=0.35, i_max_to=0.35)
    brs[2] = replace(brs[2], i_max_from=0.55, i_max_to=0.55)
    return replace(g, ac_branches=tuple(brs), name="tight_triangle")


def tree4(load: float = 1.0) -> Grid:
    """Four buses on a path with one generator at each end."""
    buses = tuple(Bus(0.95, 1.05, label=k + 1) for k in range(4))
    brs = (AcBranch(0, 1, 0.01, 0.05, 0.02, i_max_from=2.0, i_max_to=2.0, label=1),
           AcBranch(1, 2, 0.02, 0.06, 0.02, i_max_from=2.0, i_max_to=2.0, label=2),
           AcBranch(2, 3, 0.01, 0.04, 0.02, i_max_from=2.0, i_max_to=2.0, label=3))
    gens = (GenSpec(0, Box(0.0, 3.0, -2.0, 2.0), Quadratic(150.0, 2000.0, 0.0), label=1),
            GenSpec(3, Box(0.0, 3.0, -2.0, 2.0), Quadratic(300.0, 2600.0, 0.0), label=2))
    loads = (LoadSpec.fixed(1, 0.6 * load, 0.2 * load, label=1),
             LoadSpec.fixed(2, 0.8 * load, 0.25 * load, label=2))
    return Grid(buses, brs, (), gens, loads, BASE, 0, "tree4")


def demo_hybrid4() -> Grid:
    """Four-bus ring with its most resistive line operated as HVDC."""
    buses = tuple(Bus(0.95, 1.05, label=k + 1) for k in range(4))
    brs = (AcBranch(0, 1, 0.01, 0.06, 0.02, i_max_from=1.5, i_max_to=1.5, label=1),
           AcBranch(1, 2, 0.015, 0.07, 0.02, i_max_from=1.5, i_max_to=1.5, label=2),
           AcBranch(2, 3, 0.012, 0.05, 0.02, i_max_from=1.5, i_max_to=1.5, label=3),
           AcBranch(3, 0, 0.03, 0.10, 0.02, i_max_from=1.0, i_max_to=1.0, label=4))
    gens = (GenSpec(0, Box(0.0, 3.0, -1.5, 1.5), Quadratic(120.0, 1800.0, 0.0), label=1),
            GenSpec(2, Box(0.0, 2.0, -1.5, 1.5), Quadratic(250.0, 2400.0, 0.0), label=2))
    loads = (LoadSpec.fixed(1, 0.9, 0.3, label=1), LoadSpec.fixed(3, 1.1, 0.35, label=2))
    meshed = Grid(buses, brs, (), gens, loads, BASE, 0, "demo4")
    return replace(upgrade_to_hybrid(meshed), name="demo_hybrid4")


def overloaded() -> Grid:
    """Fixed load above the total generating capacity."""
    return replace(two_bus(load=12.0), name="overloaded")


def case9() -> Grid:
    """The WSCC 9-bus case shipped with the package (lossless lines given a floor)."""
    text = resources.files("gridlmp").joinpath("data/case9.m").read_text()
    g, _ = enforce_min_resistance(to_grid(parse_matpower(text), "case9"))
    return g


# Per-branch rating factors and per-bus load factors of the stressed 9-bus case.
STRESSED_BRANCH_FACTORS = (0.47, 0.80, 0.23, 0.82, 0.66, 0.77, 0.82, 0.89, 0.88)
STRESSED_LOAD_FACTORS = (0.83, 1.44, 1.41, 0.74, 1.69, 1.46, 0.64, 1.61, 1.05)


def case9_stressed() -> Grid:
    """9-bus case with tightened ratings, a raised voltage floor and heavier loads.

    The meshed grid's cone relaxation is inexact; its hybrid upgrade is exact.
    """
    g = case9()
    brs = tuple(replace(b, i_max_from=b.i_max_from * f, i_max_to=b.i_max_to * f)
                for b, f in zip(g.ac_branches, STRESSED_BRANCH_FACTORS))
    buses = tuple(replace(b, v_min=1.0) for b in g.buses)
    g = replace(g, ac_branches=brs, buses=buses, name="case9_stressed")
    return scale_loads(g, list(STRESSED_LOAD_FACTORS))


def random_grid(rng: np.random.Generator, n: int, extra_edges: int = 1,
                hybrid: bool = False) -> Grid:
    """Random connected grid: a random spanning tree plus ``extra_edges`` chords.

    Loads are kept well below capacity so that instances are feasible.
    """
    buses = tuple(Bus(0.94, 1.06, g_shunt=0.0, b_shunt=float(rng.uniform(0.0, 0.05)),
                      label=k + 1) for k in range(n))
    edges = []
    for k in range(1, n):
        edges.append((int(rng.integers(0, k)), k))
    chords = [(a, b) for a in range(n) for b in range(a + 1, n)
              if (a, b) not in edges and (b, a) not in edges]
    rng.shuffle(chords)
    edges += chords[:extra_edges]
    brs = []
    for k, (a, b) in enumerate(edges):
        r = float(rng.uniform(0.005, 0.04))
        x = float(rng.uniform(2.0, 6.0)) * r
        lim = float(rng.uniform(0.8, 2.0))
        brs.append(AcBranch(a, b, r, x, float(rng.uniform(0.0, 0.05)),
                            i_max_from=lim, i_max_to=lim, label=k + 1))
    gen_buses = sorted(set([0] + [int(b) for b in rng.choice(n, size=max(1, n // 3), replace=False)]))
    gens = tuple(GenSpec(b, Box(0.0, float(rng.uniform(1.5, 3.0)), -1.5, 1.5),
                         Quadratic(float(rng.uniform(50, 400)), float(rng.uniform(1500, 4000)), 0.0),
                         label=k + 1) for k, b in enumerate(gen_buses))
    cap = sum(gn.capability.p_max for gn in gens)
    load_buses = [b for b in range(n) if b not in gen_buses] or [n - 1]
    share = rng.dirichlet(np.ones(len(load_buses))) * 0.45 * cap
    loads = tuple(LoadSpec.fixed(b, float(p), float(p) * float(rng.uniform(0.1, 0.4)), label=k + 1)
                  for k, (b, p) in enumerate(zip(load_buses, share)))
    g = Grid(buses, tuple(brs), (), gens, loads, BASE, 0, f"random{n}")
    return upgrade_to_hybrid(g) if hybrid else g


def all_fixtures() -> dict:
    return {
        "two_bus": two_bus(),
        "congested_two_bus": congested_two_bus(),
        "symmetric_two_bus": symmetric_two_bus(),
        "two_bus_hybrid": two_bus_hybrid(),
        "triangle": triangle(),
        "tight_triangle": tight_triangle(),
        "tree4": tree4(),
        "demo_hybrid4": demo_hybrid4(),
        "overloaded": overloaded(),
        "case9": case9(),
        "case9_stressed": case9_stressed(),
    }
