import numpy as np
import pytest

from gridlmp import cases
from gridlmp.errors import NoStrictPoint, TooLarge
from gridlmp.grid import AcBranch, Box, Bus, GenSpec, Grid, LoadSpec, Quadratic
from gridlmp.matrices import build_constraint_system
from gridlmp.sdr import build_sdr, solve_sdr, strict_point
from gridlmp.socr import solve_socr


def _gen_everywhere3():
    """Triangle with a generator at every bus so that any flat-start shift can be absorbed."""
    buses = tuple(Bus(0.9, 1.1, label=k + 1) for k in range(3))
    brs = (AcBranch(0, 1, 0.01, 0.08, 0.02, i_max_from=2.0, i_max_to=2.0, label=1),
           AcBranch(1, 2, 0.02, 0.10, 0.02, i_max_from=2.0, i_max_to=2.0, label=2),
           AcBranch(0, 2, 0.03, 0.12, 0.02, i_max_from=2.0, i_max_to=2.0, label=3))
    gens = tuple(GenSpec(k, Box(0.0, 2.0, -1.0, 1.0), Quadratic(100.0 * (k + 1), 2000.0, 0.0),
                         label=k + 1) for k in range(3))
    loads = (LoadSpec.fixed(2, 0.8, 0.2, label=1),)
    return Grid(buses, brs, (), gens, loads, 100.0, 0, "gen_everywhere3")


@pytest.mark.parametrize("grid", [cases.two_bus(r=0.01), cases.congested_two_bus(),
                                  cases.symmetric_two_bus()], ids=lambda g: g.name)
def test_two_bus_relaxations_coincide(grid):
    sdr, socr = solve_sdr(grid), solve_socr(grid)
    assert sdr.optimal and socr.optimal
    assert sdr.objective == pytest.approx(socr.objective, rel=1e-7)


def test_tree_relaxations_coincide():
    g = cases.tree4()
    sdr, socr = solve_sdr(g), solve_socr(g)
    assert sdr.optimal
    assert sdr.objective == pytest.approx(socr.objective, rel=1e-6)
    assert sdr.eigen_ratio <= 1e-6


def test_hybrid_tree_relaxations_coincide():
    g = cases.demo_hybrid4()
    sdr, socr = solve_sdr(g), solve_socr(g)
    assert sdr.optimal
    assert sdr.objective == pytest.approx(socr.objective, rel=1e-6)


@pytest.mark.parametrize("grid", [cases.triangle(), cases.tight_triangle()], ids=lambda g: g.name)
def test_meshed_sdr_is_tighter(grid):
    sdr, socr = solve_sdr(grid), solve_socr(grid)
    assert sdr.optimal and socr.optimal
    assert sdr.objective <= socr.objective + 1e-7 * abs(socr.objective)


def test_tight_triangle_gap_is_large():
    g = cases.tight_triangle()
    assert solve_sdr(g).objective < solve_socr(g).objective - 100.0


def test_size_cap():
    g = cases.case9()
    with pytest.raises(TooLarge):
        solve_sdr(g, cap=8)
    with pytest.raises(TooLarge):
        build_sdr(build_constraint_system(g), g, cap=4)


def test_sdr_matrix_is_psd():
    sol = solve_sdr(cases.triangle())
    assert np.allclose(sol.V, sol.V.conj().T)
    assert sol.eigenvalues[-1] >= -1e-6


@pytest.mark.parametrize("grid", [cases.two_bus(), _gen_everywhere3(), cases.triangle(), cases.tree4(),
                                  cases.demo_hybrid4(), cases.case9()], ids=lambda g: g.name)
def test_strict_point(grid):
    cs = build_constraint_system(grid)
    pt = strict_point(cs, grid, 1e-4)
    assert pt.strict
    # direct re-evaluation of every row and the PD test
    assert np.all(cs.evaluate_rows(pt.V, pt.x) < cs.b())
    assert np.linalg.eigvalsh(pt.V)[0] > 0
    np.testing.assert_allclose(pt.g - pt.d, [[np.trace(cs.P[k].toarray() @ pt.V).real + cs.H[k] @ pt.x,
                                              np.trace(cs.Q[k].toarray() @ pt.V).real]
                                             for k in range(cs.n)], atol=1e-9)


def test_strict_point_with_dc():
    g = cases.two_bus_hybrid()
    pt = strict_point(build_constraint_system(g), g, 1e-4)
    assert pt.strict
    assert np.all(pt.x > 0)


def test_zero_eps_not_strict():
    g = cases.two_bus()
    pt = strict_point(build_constraint_system(g), g, 0.0)
    assert not pt.strict
    assert pt.min_eig == pytest.approx(0.0, abs=1e-12)


def test_tight_limits_give_non_strict_candidate():
    g = cases.tight_triangle()
    pt = strict_point(build_constraint_system(g), g, 1e-4)
    assert not pt.strict and pt.row_slack < 0


def test_no_strict_point_when_overloaded():
    g = cases.overloaded()
    with pytest.raises(NoStrictPoint):
        strict_point(build_constraint_system(g), g, 1e-4)
