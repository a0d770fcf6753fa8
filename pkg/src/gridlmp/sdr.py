"""Full semidefinite relaxation on small grids, and strictly feasible points.

The semidefinite relaxation keeps the whole N x N Gram matrix under a single
PSD constraint.  It is tighter than the branch-wise cone relaxation and is
used only as a cross-check on tiny instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares, linprog

from . import conic
from .errors import NoStrictPoint, TooLarge
from .grid import Grid, scale_objective
from .matrices import ConstraintSystem, build_constraint_system, trace_real
from .socr import build_socr, converter_units, objective_scale

DEFAULT_CAP = 12
EIG_FLOOR = 1e-12   # relative; below this V counts as singular
# Interior-point accuracy on PSD cones is a few digits below the SOC path,
# and the dual residual stalls first.  The diagnostic only needs a primal
# point and a small gap, so the dual is held to a looser bound.
SDR_TOL = 1e-6
SDR_DUAL_TOL = 1e-4


@dataclass
class SdrSolution:
    status: str
    V: Optional[np.ndarray] = None
    p: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None
    d: Optional[np.ndarray] = None
    unit_dispatch: Optional[np.ndarray] = None
    objective: float = math.nan
    eigenvalues: Optional[np.ndarray] = None     # descending
    residuals: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    @property
    def eigen_ratio(self) -> float:
        """``lambda_2 / lambda_1`` of V (0 for a rank-one matrix)."""
        ev = self.eigenvalues
        if ev is None or ev.size < 2 or ev[0] <= 0:
            return 0.0
        return float(max(ev[1], 0.0) / ev[0])


def build_sdr(cs: ConstraintSystem, grid: Grid, cap: int = DEFAULT_CAP):
    """One N x N Hermitian PSD block plus the relaxation's balance and limit rows."""
    if cs.n > cap:
        raise TooLarge(cs.n, cap)
    return build_socr(cs, grid, full_psd=True)


def solve_sdr(grid: Grid, tol: float = SDR_TOL, cap: int = DEFAULT_CAP,
              cs: Optional[ConstraintSystem] = None) -> SdrSolution:
    cs = cs or build_constraint_system(grid)
    if cs.n > cap:
        raise TooLarge(cs.n, cap)
    sigma = objective_scale(grid)
    prog, lay = build_sdr(cs, scale_objective(grid, 1.0 / sigma), cap)
    # A tight solve succeeds on well-conditioned instances; otherwise fall
    # back to the loose acceptance rule above.
    sol = conic.solve(prog, tol=min(tol, conic.DEFAULT_TOL))
    if not sol.optimal:
        sol = conic.solve(prog, tol=tol)
    res = sol.residuals
    accepted = sol.optimal or (sol.x is not None and res and res["r_primal"] <= tol
                               and res["r_gap"] <= tol and res["r_dual"] <= SDR_DUAL_TOL)
    if not accepted:
        return SdrSolution(status=sol.status, residuals=dict(res))
    n = cs.n
    V = conic.hermitian_from_coords(sol.x[lay.gram], n)
    units = np.array([sol.x[c:c + 2] for c in lay.unit_vars]).reshape(-1, 2)
    g = np.zeros((n, 2))
    for u, val in zip(lay.units, units):
        g[u.bus] += val
    d = lay.fixed.copy()
    for ld, c in zip(lay.flex_loads, lay.load_vars):
        d[ld.bus] += sol.x[c:c + 2]
    ev = np.linalg.eigvalsh(V)[::-1]
    return SdrSolution(status="optimal", V=V, p=sol.x[lay.dc].copy(), g=g, d=d,
                       unit_dispatch=units, objective=sol.primal_objective * sigma,
                       eigenvalues=ev, residuals=dict(sol.residuals))


# ---------------------------------------------------------------------------
# Strictly feasible points
# ---------------------------------------------------------------------------

@dataclass
class StrictPoint:
    V: np.ndarray
    x: np.ndarray                  # DC direction variables
    unit_dispatch: np.ndarray      # (units, 2), generators then converter support
    load_dispatch: np.ndarray      # (flexible loads, 2)
    g: np.ndarray
    d: np.ndarray
    row_slack: float               # min over rows of b - (trace(C V) + c^T x)
    region_slack: float            # min distance inside the injection/withdrawal regions
    min_eig: float
    strict: bool


def _dispatch_lp(required: np.ndarray, units, flex):
    """Dispatch matching ``required`` (N, 2) net injection, maximizing interior slack."""
    nu, nl = len(units), len(flex)
    nz = 2 * (nu + nl) + 1
    t = nz - 1
    A_eq, b_eq, A_ub, b_ub = [], [], [], []
    for bus in range(required.shape[0]):
        for comp in (0, 1):
            row = np.zeros(nz)
            for k, u in enumerate(units):
                if u.bus == bus:
                    row[2 * k + comp] = 1.0
            for k, ld in enumerate(flex):
                if ld.bus == bus:
                    row[2 * (nu + k) + comp] = -1.0
            A_eq.append(row)
            b_eq.append(required[bus, comp])
    regions = [u.capability for u in units] + [ld.region for ld in flex]
    for k, region in enumerate(regions):
        a_eq, r_eq, a_ub, r_ub = region.linear_constraints()
        for a, rhs in zip(a_eq, r_eq):
            row = np.zeros(nz)
            row[2 * k:2 * k + 2] = a
            A_eq.append(row)
            b_eq.append(rhs)
        for a, rhs in zip(a_ub, r_ub):
            row = np.zeros(nz)
            row[2 * k:2 * k + 2] = a
            row[t] = float(np.linalg.norm(a))
            A_ub.append(row)
            b_ub.append(rhs)
    c = np.zeros(nz)
    c[t] = -1.0
    bounds = [(None, None)] * (nz - 1) + [(None, 1.0)]
    res = linprog(c, A_ub=np.array(A_ub) if A_ub else None, b_ub=b_ub or None,
                  A_eq=np.array(A_eq), b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    z = res.x
    return z[:2 * nu].reshape(-1, 2), z[2 * nu:2 * (nu + nl)].reshape(-1, 2), float(z[t])


def _centered_start(grid: Grid, dc_flow: float):
    """Voltages and DC flows of a lossless power flow whose dispatch is centred.

    Active dispatch maximizes its distance to the unit limits; angles follow
    from the linearized flow equations and magnitudes sit mid-range.
    """
    n, ng = grid.n_buses, len(grid.generators)
    flex = [d for d in grid.loads if not d.is_fixed]
    nl, nd = len(flex), grid.n_dc
    # variables: theta (n), gen P (ng), flexible load P (nl), signed DC flow (nd), t
    nz = n + ng + nl + nd + 1
    t = nz - 1
    A_eq, b_eq, A_ub, b_ub = [], [], [], []
    bal = np.zeros((n, nz))
    rhs = np.zeros(n)
    for br in grid.ac_branches:
        b = 1.0 / (br.x * br.tap)
        i, j = br.from_bus, br.to_bus
        bal[i, i] -= b
        bal[i, j] += b
        bal[j, i] += b
        bal[j, j] -= b
    for k, u in enumerate(grid.generators):
        bal[u.bus, n + k] += 1.0
    for k, d in enumerate(flex):
        bal[d.bus, n + ng + k] -= 1.0
    for k, br in enumerate(grid.dc_branches):
        bal[br.from_bus, n + ng + nl + k] -= 1.0
        bal[br.to_bus, n + ng + nl + k] += 1.0
    for d in grid.loads:
        if d.is_fixed:
            rhs[d.bus] += d.region.p_min
    for k, bus in enumerate(grid.buses):
        rhs[k] += bus.g_shunt
    A_eq += list(bal)
    b_eq += list(rhs)
    ref = np.zeros(nz)
    ref[grid.reference_bus] = 1.0
    A_eq.append(ref)
    b_eq.append(0.0)
    spans = [(n + k, u.capability.p_min, u.capability.p_max) for k, u in enumerate(grid.generators)]
    spans += [(n + ng + k, d.region.p_min, d.region.p_max) for k, d in enumerate(flex)]
    for col, lo, hi in spans:
        row = np.zeros(nz)
        row[col], row[t] = 1.0, 1.0
        A_ub.append(row)
        b_ub.append(hi)
        row = np.zeros(nz)
        row[col], row[t] = -1.0, 1.0
        A_ub.append(row)
        b_ub.append(-lo)
    c = np.zeros(nz)
    c[t] = -1.0
    bounds = [(None, None)] * (n + ng + nl)
    bounds += [(0.5 * br.p_min, 0.5 * br.p_max) for br in grid.dc_branches]
    bounds += [(None, 1.0)]
    res = linprog(c, A_ub=np.array(A_ub) if A_ub else None, b_ub=b_ub or None,
                  A_eq=np.array(A_eq), b_eq=b_eq, bounds=bounds, method="highs")
    if res.status != 0:
        return None
    theta = res.x[:n]
    mags = np.array([0.5 * (b.v_min + b.v_max) for b in grid.buses])
    flows = res.x[n + ng + nl:n + ng + nl + nd]
    x = np.zeros(2 * nd)
    for k, br in enumerate(grid.dc_branches):
        x[2 * k] = max(flows[k], 0.0) + min(dc_flow, 0.5 * max(br.p_max, 0.0))
        x[2 * k + 1] = max(-flows[k], 0.0) + min(dc_flow, 0.5 * max(-br.p_min, 0.0))
    return mags * np.exp(1j * theta), x


def _passive_solve(cs: ConstraintSystem, grid: Grid, eps: float, v, x):
    """Adjust voltages at buses without controllable injection so that their
    balance holds exactly for ``V = v v^H + eps I``; returns None on failure."""
    n = cs.n
    # Converter-only buses count as passive: their support is aimed at the
    # middle of its symmetric range, zero.
    p_free = {u.bus for u in grid.generators} | {d.bus for d in grid.loads if not d.is_fixed}
    q_free = p_free
    p_rows = [k for k in range(n) if k not in p_free]
    q_rows = [k for k in range(n) if k not in q_free]
    if not p_rows and not q_rows:
        return v
    fixed = np.zeros((n, 2))
    for d in grid.loads:
        if d.is_fixed:
            fixed[d.bus] += (d.region.p_min, d.region.q_min)
    ang_idx = [k for k in p_rows if k != grid.reference_bus]
    mag_idx = q_rows
    mag0, ang0 = np.abs(v), np.angle(v)
    P = [cs.P[k].toarray() for k in range(n)]
    Q = [cs.Q[k].toarray() for k in range(n)]

    def volts(z):
        mag, ang = mag0.copy(), ang0.copy()
        mag[mag_idx] = z[:len(mag_idx)]
        ang[ang_idx] = z[len(mag_idx):]
        return mag * np.exp(1j * ang)

    def resid(z):
        u = volts(z)
        out = [np.real(u.conj() @ P[k] @ u) + eps * np.trace(P[k]).real + cs.H[k] @ x + fixed[k, 0]
               for k in p_rows]
        out += [np.real(u.conj() @ Q[k] @ u) + eps * np.trace(Q[k]).real + fixed[k, 1] for k in q_rows]
        return np.array(out)

    z0 = np.concatenate([mag0[mag_idx], ang0[ang_idx]])
    if z0.size == 0:
        return None
    sol = least_squares(resid, z0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if np.max(np.abs(sol.fun)) > 1e-10:
        return None
    return volts(sol.x)


def _candidate(cs: ConstraintSystem, grid: Grid, eps: float, v, x) -> Optional[StrictPoint]:
    n = cs.n
    V = np.outer(v, v.conj()) + eps * np.eye(n)
    units = list(grid.generators) + converter_units(grid)
    flex = [d for d in grid.loads if not d.is_fixed]
    fixed = np.zeros((n, 2))
    for d in grid.loads:
        if d.is_fixed:
            fixed[d.bus] += (d.region.p_min, d.region.q_min)
    required = np.array([[trace_real(cs.P[k], V) + cs.H[k] @ x + fixed[k, 0],
                          trace_real(cs.Q[k], V) + fixed[k, 1]] for k in range(n)])
    out = _dispatch_lp(required, units, flex)
    if out is None:
        return None
    udisp, ldisp, slack = out
    g = np.zeros((n, 2))
    for u, val in zip(units, udisp):
        g[u.bus] += val
    d = fixed.copy()
    for ld, val in zip(flex, ldisp):
        d[ld.bus] += val
    rows = cs.evaluate_rows(V, x)
    row_slack = float(np.min(cs.b() - rows)) if rows.size else math.inf
    ev = np.linalg.eigvalsh(V)
    min_eig = float(ev[0])
    x_ok = bool(np.all(x > 0)) if x.size else True
    strict = row_slack > 0 and slack > 0 and min_eig > EIG_FLOOR * max(1.0, ev[-1]) and x_ok
    return StrictPoint(V=V, x=x, unit_dispatch=udisp, load_dispatch=ldisp, g=g, d=d,
                       row_slack=row_slack, region_slack=slack, min_eig=min_eig,
                       strict=bool(strict))


def strict_point(cs: ConstraintSystem, grid: Grid, eps: float,
                 v=None, dc_flow: float = 1e-3) -> StrictPoint:
    """Candidate interior point ``V = v v^H + eps I`` with dispatch absorbing the shift.

    Without ``v`` the starts are a lossless power flow with centred dispatch
    (first with load-only buses re-solved for exact balance, then as is) and
    the flat profile.  Every DC direction variable gets at least
    ``dc_flow`` so that its sign constraint is strict.  The dispatch is chosen
    by an LP that maximizes the distance to the region boundaries.  The first
    strict candidate is returned, otherwise the one with the largest slack.
    """
    small = np.zeros(cs.n_dc_vars)
    for k, br in enumerate(grid.dc_branches):
        small[2 * k] = min(dc_flow, 0.5 * max(br.p_max, 0.0))
        small[2 * k + 1] = min(dc_flow, 0.5 * max(-br.p_min, 0.0))
    if v is not None:
        starts = [(np.asarray(v, dtype=complex), small)]
    else:
        starts = []
        centred = _centered_start(grid, dc_flow)
        if centred is not None:
            adjusted = _passive_solve(cs, grid, eps, *centred)
            if adjusted is not None:
                starts.append((adjusted, centred[1]))
            starts.append(centred)
        starts.append((np.ones(cs.n, dtype=complex), small))
    best = None
    for v0, x0 in starts:
        pt = _candidate(cs, grid, eps, v0, x0)
        if pt is None or pt.region_slack < 0:
            continue
        if pt.strict:
            return pt
        if best is None or min(pt.row_slack, pt.region_slack) > min(best.row_slack, best.region_slack):
            best = pt
    if best is None:
        raise NoStrictPoint("no dispatch inside the injection regions balances the candidate voltages")
    return best
