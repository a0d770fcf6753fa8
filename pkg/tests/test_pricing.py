import json
import math
from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp

import oracles
from gridlmp import cases
from gridlmp.errors import (CertificateInconsistency, DisconnectedAcSubgraph,
                            SubdifferentialViolation, ZeroDenominator)
from gridlmp.grid import Box, GenSpec, Quadratic
from gridlmp.matrices import ConstraintSystem, build_constraint_system
from gridlmp.pricing import (balance_residual, certify, lambda_k_zero_check,
                             lmp_subdifferential_check, margin_threshold, pathological_verdict,
                             price, rank_condition, recover_voltages, relaxation_error,
                             subspace_dimension, subspace_margins, safe_sign_flags)
from gridlmp.socr import PartialGram, solve_socr

SOLVED = ["two_bus", "congested_two_bus", "symmetric_two_bus", "two_bus_hybrid", "triangle",
          "tight_triangle", "tree4", "demo_hybrid4", "case9", "case9_stressed"]
EXACT = ["congested_two_bus", "two_bus_hybrid", "tree4", "demo_hybrid4"]


@pytest.fixture(scope="module")
def reports():
    fx = cases.all_fixtures()
    out = {}
    for name in SOLVED:
        g = fx[name]
        cs = build_constraint_system(g)
        out[name] = (g, cs, certify(solve_socr(g, cs=cs), cs, g))
    return out


def _pg(blocks):
    """PartialGram for a 2-bus grid from one 2x2 block."""
    B = np.asarray(blocks, dtype=complex)
    return PartialGram(np.array([B[0, 0].real, B[1, 1].real]), np.array([B[0, 1]]))


# -- rank condition -----------------------------------------------------------

def test_rank_one_block():
    v = np.array([1.02, 0.97 * np.exp(-0.2j)])
    r = rank_condition(PartialGram.from_voltages(v, ((0, 1),)), ((0, 1),))[0]
    assert r["ratio"] <= 1e-15 and r["passed"]


def test_identity_block_fails():
    r = rank_condition(_pg(np.eye(2)), ((0, 1),))[0]
    assert r["ratio"] == pytest.approx(1.0) and not r["passed"]


def test_near_rank_one_block():
    r = rank_condition(_pg([[1, 0.999], [0.999, 1]]), ((0, 1),))[0]
    assert r["lambda2"] == pytest.approx(0.001)
    assert r["ratio"] == pytest.approx(0.001 / 1.999)
    assert not r["passed"]


# -- voltage recovery and kappa ---------------------------------------------

def test_flat_recovery():
    pairs = ((0, 1), (1, 2))
    W = PartialGram(np.ones(3), np.ones(2, dtype=complex))
    np.testing.assert_allclose(recover_voltages(W, pairs, 3), np.ones(3))


def test_path_recovery_angles():
    pairs = ((0, 1), (1, 2))
    W = PartialGram(np.ones(3), np.exp(1j * np.array([0.1, 0.2])))
    v = recover_voltages(W, pairs, 3)
    np.testing.assert_allclose(np.angle(v), [0.0, -0.1, -0.3], atol=1e-15)


def test_recovery_from_other_reference():
    pairs = ((0, 1), (1, 2))
    W = PartialGram(np.ones(3), np.exp(1j * np.array([0.1, 0.2])))
    v = recover_voltages(W, pairs, 3, reference_bus=2)
    np.testing.assert_allclose(np.angle(v), [0.3, 0.2, 0.0], atol=1e-15)


def test_disconnected_recovery():
    W = PartialGram(np.ones(3), np.ones(1, dtype=complex))
    with pytest.raises(DisconnectedAcSubgraph):
        recover_voltages(W, ((0, 1),), 3)


def test_hybrid_recovery_reproduces_gram(reports):
    g, cs, rep = reports["demo_hybrid4"]
    W, v = rep.solution.W, rep.recovered_v
    for k, (i, j) in enumerate(cs.pairs):
        assert abs(v[i] * np.conj(v[j]) - W.offdiag[k]) <= 1e-7


def test_kappa_zero_on_rank_one():
    v = np.array([1.0, 0.98 * np.exp(-0.1j), 1.01 * np.exp(0.05j)])
    pairs = ((0, 1), (1, 2), (0, 2))
    W = PartialGram.from_voltages(v, pairs)
    kap, mean, mx = relaxation_error(W, v, pairs)
    assert mx <= 1e-15 and mean <= 1e-15


def test_kappa_of_one_percent_perturbation():
    v = np.array([1.0, 0.98 * np.exp(-0.1j), 1.01 * np.exp(0.05j)])
    pairs = ((0, 1), (1, 2))
    W = PartialGram.from_voltages(v, pairs)
    off = W.offdiag.copy()
    off[1] += 0.01 * abs(off[1]) * np.exp(0.7j)
    kap, mean, mx = relaxation_error(PartialGram(W.diag, off), v, pairs)
    assert kap[1] == pytest.approx(0.01) and mx == pytest.approx(0.01)
    assert kap[0] == pytest.approx(0.0, abs=1e-15)


def test_zero_denominator():
    with pytest.raises(ZeroDenominator):
        relaxation_error(PartialGram(np.zeros(2), np.zeros(1, dtype=complex)), np.zeros(2), ((0, 1),))


def test_meshed_tight_grid_is_inexact(reports):
    _, _, rep = reports["tight_triangle"]
    assert rep.kappa_mean > 1e-3
    assert not rep.exact
    assert rep.lmp_p is None and rep.dual_p is not None


# -- dual certificates --------------------------------------------------------

def test_margins_zero_at_origin():
    cs = build_constraint_system(cases.triangle())
    m = subspace_margins(cs, np.zeros((3, 2)), np.zeros(cs.n_rows))
    assert not m.any()
    assert pathological_verdict(m, 0.0)["pathological"]


def test_hybrid_margins_certify(reports):
    _, cs, rep = reports["demo_hybrid4"]
    assert np.all(rep.margins > 1e-3)
    assert not rep.pathological and rep.exact
    assert np.all(rep.rank_ratio <= 1e-6)


def test_safe_sign_flags():
    pairs = ((0, 1), (1, 2))
    assert safe_sign_flags(np.array([[20.0, 1.0], [25.0, 0.5], [30.0, 0.0]]), pairs).all()
    flags = safe_sign_flags(np.array([[20.0, 1.0], [25.0, -0.5], [30.0, 0.0]]), pairs)
    assert not flags.any()
    flags = safe_sign_flags(np.array([[0.0, 0.0], [0.0, 0.0], [30.0, 0.0]]), pairs)
    assert flags.tolist() == [False, True]


def test_lambda_k_identity_on_exact_solve(reports):
    _, cs, rep = reports["tree4"]
    checks = lambda_k_zero_check(rep.solution, cs, rep.margins, rep.margin_tol)
    assert all(c["passed"] and c["check"] == "offdiag" for c in checks)


def test_lambda_k_negative_control(reports):
    _, cs, rep = reports["tree4"]
    bad = replace(rep.solution, lam_k=rep.solution.lam_k.copy())
    bad.lam_k[0, 0, 1] += 1.0
    bad.lam_k[0, 1, 0] += 1.0
    with pytest.raises(CertificateInconsistency):
        lambda_k_zero_check(bad, cs, rep.margins, rep.margin_tol)


def test_zero_price_instance_is_pathological():
    g = cases.two_bus(cheap=0.0, expensive=0.0)
    cs = build_constraint_system(g)
    sol = solve_socr(g, cs=cs)
    rep = certify(sol, cs, g)
    assert rep.pathological
    assert np.max(np.abs(sol.lam)) <= 1e-6
    checks = lambda_k_zero_check(sol, cs, rep.margins, rep.margin_tol)
    assert all(c["check"] == "zero" and c["error"] <= 1e-6 for c in checks)
    # the rank test decides the verdict
    ranks_ok = all(r["passed"] for r in rank_condition(sol.W, cs.pairs))
    assert rep.exact == (ranks_ok and rep.kappa_max <= 1e-6)


def test_subspace_rank_bounds():
    g = cases.random_grid(np.random.default_rng(4), 4, extra_edges=1)
    cs = build_constraint_system(g)
    total = 2 * cs.n + cs.n_rows
    for k in range(len(cs.pairs)):
        d = subspace_dimension(cs, k)
        assert d["rank"] in (1, 2)
        assert d["dim"] in (total - 2, total - 1)


def test_collinear_entries_give_rank_one():
    def herm(c):
        return sp.csr_matrix(np.array([[0, c], [np.conj(c), 0]], dtype=complex))
    c = 0.3 - 0.4j
    cs = ConstraintSystem(n=2, pairs=((0, 1),), Y=sp.csr_matrix((2, 2)),
                          P=[herm(c), herm(3 * c)], Q=[herm(-c), herm(0)], branch=[],
                          H=np.zeros((2, 0)), rows=[])
    assert subspace_dimension(cs, 0)["rank"] == 1


@pytest.mark.parametrize("name", SOLVED)
def test_certificate_implications(reports, name):
    _, cs, rep = reports[name]
    assert rep.status == "optimal"
    # a margin clear of zero forces a rank-one block
    for m, r in zip(rep.margins, rep.rank_ratio):
        if m > rep.margin_tol:
            assert r <= 1e-6
    # all-safe sign pattern forces nonzero margins
    for flag, m in zip(rep.safe_sign, rep.margins):
        if flag:
            assert m > 0
    if rep.exact:
        assert np.all(rep.rank_ratio <= 1e-6)
        assert rep.kappa_max <= 1e-6


@pytest.mark.parametrize("name", EXACT)
def test_exact_point_is_feasible(reports, name):
    g, cs, rep = reports[name]
    assert rep.exact
    sol = rep.solution
    assert rep.balance_mean_mva <= 1e-5 * g.base_mva
    rows = cs.evaluate_rows(rep.recovered_v, sol.p)
    assert np.all(rows <= cs.b() + 1e-5)
    assert oracles.branch_ok(g, rep.recovered_v, slack=1e-5)
    cost = sum(u.cost(p) for u, (p, _) in zip(g.generators, sol.unit_dispatch))
    assert -cost == pytest.approx(sol.objective, abs=1e-5 * (1 + abs(sol.objective)))


def test_exact_verdicts(reports):
    verdicts = {name: rep.exact for name, (_, _, rep) in reports.items()}
    for name in EXACT:
        assert verdicts[name], name
    assert not verdicts["tight_triangle"]
    assert not verdicts["case9_stressed"]


@pytest.mark.parametrize("make", [cases.two_bus, cases.symmetric_two_bus])
def test_lossless_uncongested_line_is_degenerate(make):
    # no losses and no congestion: every network dual vanishes and the optimal
    # face holds non-rank-one points; a resistance floor removes the degeneracy
    rep = price(make())
    assert rep.pathological
    from gridlmp.grid import enforce_min_resistance
    fixed, count = enforce_min_resistance(make())
    assert count == 1
    rep = price(fixed)
    assert rep.exact and not rep.pathological


def test_kappa_zero_iff_rank_zero(reports):
    for g, _, rep in reports.values():
        ranks_ok = bool(np.all(rep.rank_ratio <= 1e-6))
        if rep.kappa_max <= 1e-6:
            assert ranks_ok
        if g.is_hybrid_architecture():
            # without AC cycles the block phases always fit together
            assert ranks_ok == (rep.kappa_max <= 1e-6)


# -- balance and subdifferential -----------------------------------------------

def test_zero_mismatch_on_empty_operating_point():
    g = cases.two_bus()
    cs = build_constraint_system(g)
    mis, mean = balance_residual(g, cs, np.ones(2), None, np.zeros((2, 2)), np.zeros((2, 2)))
    assert mean == 0.0


def test_dc_dispatch_mismatch_is_losses():
    from gridlmp.dcopf import ac_mismatch, solve_dcopf
    g = cases.two_bus(r=0.03)
    sol = solve_dcopf(g)
    _, total = ac_mismatch(g, sol)
    v = np.exp(1j * sol.theta)
    i_f, _ = oracles.pi_currents(g.ac_branches[0], v[0], v[1])
    assert total == pytest.approx(abs(i_f) ** 2 * 0.03 * g.base_mva, rel=1e-9)


def test_interior_marginal_unit_sets_price(reports):
    g, _, rep = reports["triangle"]
    sol = rep.solution
    checks = lmp_subdifferential_check(sol, g)
    assert all(c["passed"] for c in checks)
    for u, (p, q), c in zip(g.generators, sol.unit_dispatch, checks):
        box = u.capability
        if box.p_min + 1e-4 < p < box.p_max - 1e-4 and box.q_min + 1e-4 < q < box.q_max - 1e-4:
            assert sol.lam[u.bus, 0] == pytest.approx(u.cost.slope(p), rel=1e-5)
            assert sol.lam[u.bus, 1] == pytest.approx(0.0, abs=1e-4)


def test_unit_at_upper_limit_price_above_cost(reports):
    g, _, rep = reports["congested_two_bus"]
    sol = rep.solution
    gen = g.generators[0]
    assert sol.unit_dispatch[0, 0] < gen.capability.p_max
    capped = replace(g, generators=(replace(gen, capability=Box(0.0, 0.5, -5.0, 5.0)),) + g.generators[1:])
    s2 = solve_socr(capped)
    assert s2.unit_dispatch[0, 0] == pytest.approx(0.5, abs=1e-6)
    assert s2.lam[0, 0] >= gen.cost.slope(0.5) - 1e-5
    assert all(c["passed"] for c in lmp_subdifferential_check(s2, capped))


def test_subdifferential_negative_control(reports):
    g, _, rep = reports["triangle"]
    bad = replace(rep.solution, lam=rep.solution.lam + np.array([[500.0, 0.0]] * 3))
    with pytest.raises(SubdifferentialViolation):
        lmp_subdifferential_check(bad, g)


# -- report ------------------------------------------------------------------

def test_report_outputs(reports):
    g, _, rep = reports["demo_hybrid4"]
    doc = json.loads(rep.to_json())
    assert doc["exact"] is True and doc["schema"] == 1
    assert doc["lmp_p"] == rep.lmp_p.tolist()
    lines = rep.to_csv().splitlines()
    assert lines[0] == "bus_id,lmp_p,lmp_q,v_mag,v_ang"
    assert len(lines) == g.n_buses + 1
    assert float(lines[1].split(",")[1]) == rep.lmp_p[0]


def test_inexact_report_withholds_prices(reports):
    _, _, rep = reports["tight_triangle"]
    for line in rep.to_csv().splitlines()[1:]:
        assert line.split(",")[1] == ""


def test_price_infeasible():
    rep = price(cases.overloaded())
    assert rep.status == "infeasible" and not rep.exact
    assert math.isnan(rep.kappa_max)
