from dataclasses import replace

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridlmp import cases
from gridlmp.errors import Disconnected, IncompatibleShifts, InvalidGrid, UnknownBranch
from gridlmp.grid import (AcBranch, Box, Bus, Grid, PiecewiseLinear, Polygon, Quadratic,
                          enforce_min_resistance, merge_parallel_branches,
                          minimum_spanning_tree, scale_branch_rating, scale_loads,
                          upgrade_to_hybrid)


def _pair(br1, br2, n=2):
    buses = tuple(Bus(label=k + 1) for k in range(n))
    return Grid(buses, (br1, br2))


def test_merge_identical_halves_impedance():
    g = _pair(AcBranch(0, 1, 0.02, 0.1, 0.03, i_max_from=1.0, i_max_to=1.0, label=1),
              AcBranch(0, 1, 0.02, 0.1, 0.03, i_max_from=1.0, i_max_to=1.0, label=2))
    m = merge_parallel_branches(g)
    assert m.n_ac == 1
    br = m.ac_branches[0]
    assert complex(br.r, br.x) == pytest.approx(0.01 + 0.05j)
    assert br.b == pytest.approx(0.06)
    assert br.i_max_from == pytest.approx(2.0)


def test_merge_equalizes_taps_to_max():
    g = _pair(AcBranch(0, 1, 0.01, 0.1, tap=1.0523, label=1),
              AcBranch(0, 1, 0.01, 0.1, tap=1.0646, label=2))
    assert merge_parallel_branches(g).ac_branches[0].tap == 1.0646


def test_merge_identity_without_parallels():
    g = cases.triangle()
    assert merge_parallel_branches(g) is g


def test_merge_anti_parallel_lines():
    g = _pair(AcBranch(0, 1, 0.02, 0.1, label=1), AcBranch(1, 0, 0.02, 0.1, label=2))
    m = merge_parallel_branches(g)
    assert m.n_ac == 1
    assert complex(m.ac_branches[0].r, m.ac_branches[0].x) == pytest.approx(0.01 + 0.05j)


def test_merge_is_idempotent_and_keeps_shunt():
    g = _pair(AcBranch(0, 1, 0.02, 0.1, 0.01, label=1), AcBranch(0, 1, 0.03, 0.2, 0.04, label=2))
    m = merge_parallel_branches(g)
    assert merge_parallel_branches(m) == m
    assert m.ac_branches[0].b == pytest.approx(0.05)


def test_merge_rejects_different_shifts():
    g = _pair(AcBranch(0, 1, 0.02, 0.1, shift=0.1), AcBranch(0, 1, 0.02, 0.1, shift=0.0))
    with pytest.raises(IncompatibleShifts):
        merge_parallel_branches(g)


def test_merge_intersects_angle_ranges():
    g = _pair(AcBranch(0, 1, 0.02, 0.1, ang_lo=-0.3, ang_hi=0.5),
              AcBranch(0, 1, 0.02, 0.1, ang_lo=-0.4, ang_hi=0.2))
    br = merge_parallel_branches(g).ac_branches[0]
    assert (br.ang_lo, br.ang_hi) == (-0.3, 0.2)


def test_min_resistance():
    g = replace(cases.triangle(), ac_branches=(
        AcBranch(0, 1, 0.0, 0.1), AcBranch(1, 2, 0.03, 0.1), AcBranch(0, 2, 1e-7, 0.1)))
    out, count = enforce_min_resistance(g, 1e-5)
    assert count == 2
    assert [br.r for br in out.ac_branches] == [1e-5, 0.03, 1e-5]
    with pytest.raises(ValueError):
        enforce_min_resistance(g, 0.0)


def test_min_resistance_count_many():
    buses = tuple(Bus() for _ in range(196))
    brs = tuple(AcBranch(k, k + 1, 0.0, 0.1) for k in range(195))
    _, count = enforce_min_resistance(Grid(buses, brs))
    assert count == 195


def test_scale_branch_rating():
    g = replace(cases.two_bus(), ac_branches=(AcBranch(0, 1, 0.01, 0.1, i_max_from=1.0,
                                                       i_max_to=1.0, label=7),))
    out = scale_branch_rating(g, [7], 1.35)
    assert out.ac_branches[0].i_max_from == pytest.approx(1.35)
    assert out.ac_branches[0].i_max_to == pytest.approx(1.35)
    assert scale_branch_rating(g, [7], 1.0) == g
    assert scale_branch_rating(g, [], 2.0) == g
    with pytest.raises(UnknownBranch):
        scale_branch_rating(g, [8], 1.35)


def test_mst_triangle_drops_most_resistive():
    g = cases.triangle()
    assert minimum_spanning_tree(g) == [0, 1]
    h = upgrade_to_hybrid(g)
    assert h.n_ac == 2 and h.n_dc == 1
    dc = h.dc_branches[0]
    assert (dc.from_bus, dc.to_bus) == (0, 2)
    assert dc.p_max == pytest.approx(99.0) and dc.p_min == -dc.p_max
    assert dc.loss_factor == pytest.approx(0.035)
    assert dc.q_capability == pytest.approx(0.25 * dc.p_max)
    assert h.is_hybrid_architecture()


def test_tree_is_fixed_point():
    g = cases.tree4()
    h = upgrade_to_hybrid(g)
    assert h.n_dc == 0 and h.ac_branches == g.ac_branches


def test_mst_tie_break_by_index():
    buses = tuple(Bus() for _ in range(3))
    brs = tuple(AcBranch(a, b, 0.01, 0.1) for a, b in ((0, 1), (1, 2), (0, 2)))
    assert minimum_spanning_tree(Grid(buses, brs)) == [0, 1]


def test_disconnected():
    buses = tuple(Bus() for _ in range(3))
    with pytest.raises(Disconnected):
        upgrade_to_hybrid(Grid(buses, (AcBranch(0, 1, 0.01, 0.1),)))


def test_conversion_fraction_formula():
    e, n = 2886, 2383
    assert round(100 * (e - n + 1) / e, 2) == 17.46


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(2, 8), extra=st.integers(0, 5))
def test_conversion_count_and_spanning_tree(seed, n, extra):
    g = cases.random_grid(np.random.default_rng(seed), n, extra_edges=extra)
    h = upgrade_to_hybrid(g)
    assert h.n_dc == g.n_ac - (g.n_buses - 1)
    tree = nx.Graph([(br.from_bus, br.to_bus) for br in h.ac_branches])
    tree.add_nodes_from(range(n))
    assert nx.is_tree(tree)
    # minimum total resistance among spanning trees
    full = nx.Graph()
    for br in g.ac_branches:
        full.add_edge(br.from_bus, br.to_bus, weight=br.r)
    best = nx.minimum_spanning_tree(full).size(weight="weight")
    assert sum(br.r for br in h.ac_branches) == pytest.approx(best)
    assert upgrade_to_hybrid(g) == h


def test_validate_reports_every_check():
    g = cases.case9()
    assert all(ok for _, ok, _ in g.validate(preprocessed=True))
    bad = replace(g, ac_branches=g.ac_branches + (AcBranch(0, 42, 0.01, 0.1),))
    failed = {name for name, ok, _ in bad.validate() if not ok}
    assert failed == {"branch endpoints"}
    with pytest.raises(InvalidGrid):
        bad.check()


def test_validate_flags_parallel_and_lossless():
    g = _pair(AcBranch(0, 1, 0.0, 0.1), AcBranch(0, 1, 0.02, 0.1))
    failed = {name for name, ok, _ in g.validate(preprocessed=True) if not ok}
    assert failed == {"lossy AC branches", "no parallel AC branches"}


def test_scale_loads_per_bus():
    g = cases.tree4()
    out = scale_loads(g, [1.0, 2.0, 0.5, 1.0])
    assert out.loads[0].region.p_min == pytest.approx(2 * g.loads[0].region.p_min)
    assert out.loads[1].region.p_min == pytest.approx(0.5 * g.loads[1].region.p_min)


def test_quadratic_cost():
    c = Quadratic(2.0, 3.0, 1.0)
    assert c(2.0) == pytest.approx(15.0)
    assert c.slope(2.0) == pytest.approx(11.0)
    assert c.is_convex


def test_pwl_cost_convexity():
    assert PiecewiseLinear(((0, 0), (1, 1), (2, 3))).is_convex
    assert not PiecewiseLinear(((0, 0), (1, 2), (2, 3))).is_convex


def test_polygon_envelope_matches_box():
    box = Box(0.0, 2.0, -1.0, 1.0)
    poly = Polygon(((0.0, -1.0), (2.0, -1.0), (2.0, 1.0), (0.0, 1.0)))
    assert box.p_max == poly.p_max == 2.0
    assert box.p_min == poly.p_min == 0.0
