"""Linearized (DC power flow) OPF with prices from the balance-row duals.

Lossless lines, flat voltage magnitudes and active power only.  HVDC links
become bounded, lossless flow variables.  Quadratic costs make the program a
cone program; linear and piecewise-linear costs keep it an LP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import conic
from .errors import Infeasible
from .grid import Grid
from .matrices import build_constraint_system
from .pricing import balance_residual
from .socr import WelfareTerms, _Rows


@dataclass
class DcOpfSolution:
    status: str
    theta: Optional[np.ndarray] = None
    flows: Optional[np.ndarray] = None        # AC branch flows, p.u., from -> to
    dc_flows: Optional[np.ndarray] = None
    dispatch: Optional[np.ndarray] = None     # per generator, p.u.
    load_dispatch: Optional[np.ndarray] = None
    lmp: Optional[np.ndarray] = None          # $/MWh
    objective: float = math.nan
    residuals: dict = field(default_factory=dict)
    base_mva: float = 100.0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def branch_susceptance(br) -> float:
    """``1 / (x * tap)``, the flow per radian of angle difference."""
    return 1.0 / (br.x * br.tap)


def solve_dcopf(grid: Grid, tol: float = conic.DEFAULT_TOL) -> DcOpfSolution:
    n = grid.n_buses
    prog = conic.ConicProgram()
    th = prog.add_variable("theta", n).start
    gen = prog.add_variable("gen", len(grid.generators)).start
    flex = [d for d in grid.loads if not d.is_fixed]
    lod = prog.add_variable("load", len(flex)).start
    dcv = prog.add_variable("dc", grid.n_dc).start

    welfare = WelfareTerms(prog)
    for k, u in enumerate(grid.generators):
        welfare.add(u.cost, gen + k, -1.0, f"gen{k}")
    for k, d in enumerate(flex):
        welfare.add(d.benefit, lod + k, 1.0, f"load{k}")
    nv = prog.n_vars

    # Net withdrawal at each bus equals minus the fixed load (shunt conductance
    # at 1 p.u. voltage counts as load).
    fixed = np.array([b.g_shunt for b in grid.buses], dtype=float)
    for d in grid.loads:
        if d.is_fixed:
            fixed[d.bus] += d.region.p_min
    coef = [dict() for _ in range(n)]

    def put(bus, col, val):
        coef[bus][col] = coef[bus].get(col, 0.0) + val

    shift_rhs = np.zeros(n)
    for br in grid.ac_branches:
        b = branch_susceptance(br)
        i, j = br.from_bus, br.to_bus
        # flow = b (theta_i - theta_j - shift) leaves i and enters j
        put(i, th + i, b)
        put(i, th + j, -b)
        put(j, th + i, -b)
        put(j, th + j, b)
        shift_rhs[i] += b * br.shift
        shift_rhs[j] -= b * br.shift
    for k, u in enumerate(grid.generators):
        put(u.bus, gen + k, -1.0)
    for k, d in enumerate(flex):
        put(d.bus, lod + k, 1.0)
    for k, br in enumerate(grid.dc_branches):
        put(br.from_bus, dcv + k, 1.0)
        put(br.to_bus, dcv + k, -1.0)
    bal = _Rows()
    for bus in range(n):
        bal.add(sorted(coef[bus].items()), -fixed[bus] + shift_rhs[bus])
    A, rhs = bal.matrix(nv)
    bal_block = prog.add_block("zero", A, rhs, "balance")

    ref = _Rows()
    ref.add([(th + grid.reference_bus, 1.0)], 0.0)
    prog.add_block("zero", *ref.matrix(nv), "reference")

    lim = _Rows()
    for br in grid.ac_branches:
        b = branch_susceptance(br)
        cap = min(br.i_max_from, br.i_max_to)
        i, j = br.from_bus, br.to_bus
        lim.add([(th + i, b), (th + j, -b)], cap + b * br.shift)
        lim.add([(th + i, -b), (th + j, b)], cap - b * br.shift)
    for k, u in enumerate(grid.generators):
        ps = u.capability.envelope()[0]
        lim.add([(gen + k, 1.0)], float(ps[-1]))
        lim.add([(gen + k, -1.0)], -float(ps[0]))
    for k, d in enumerate(flex):
        ps = d.region.envelope()[0]
        lim.add([(lod + k, 1.0)], float(ps[-1]))
        lim.add([(lod + k, -1.0)], -float(ps[0]))
    for k, br in enumerate(grid.dc_branches):
        lim.add([(dcv + k, 1.0)], br.p_max)
        lim.add([(dcv + k, -1.0)], -br.p_min)
    lim_block = prog.add_block("nonneg", *lim.matrix(nv), "limits")
    welfare.attach()

    sol = conic.solve(prog, tol=tol)
    if sol.status == "infeasible":
        raise Infeasible(f"DC OPF of {grid.name or 'grid'} is infeasible")
    if not sol.optimal:
        return DcOpfSolution(status=sol.status, base_mva=grid.base_mva)
    x = sol.x
    theta = x[th:th + n].copy()
    flows = np.array([branch_susceptance(br) * (theta[br.from_bus] - theta[br.to_bus] - br.shift)
                      for br in grid.ac_branches])
    dispatch = x[gen:gen + len(grid.generators)].copy()
    loads = x[lod:lod + len(flex)].copy()
    lam = sol.y[bal_block]
    s_lim = prog.blocks[lim_block].b - prog.blocks[lim_block].A @ x
    res = dict(sol.residuals)
    res["complementarity"] = float(np.max(np.abs(s_lim * sol.y[lim_block]))) if s_lim.size else 0.0
    res["balance"] = abs(float(dispatch.sum() - loads.sum() - fixed.sum()))
    return DcOpfSolution(status="optimal", theta=theta, flows=flows, dc_flows=x[dcv:dcv + grid.n_dc].copy(),
                         dispatch=dispatch, load_dispatch=loads, lmp=lam / grid.base_mva,
                         objective=sol.primal_objective, residuals=res, base_mva=grid.base_mva)


def ac_mismatch(grid: Grid, sol: DcOpfSolution) -> tuple[np.ndarray, float]:
    """Active-power mismatch (MW) of the DC dispatch in the AC equations.

    Voltages are ``1 at angle theta``; reactive power is not balanced.  The
    total is the slack the AC network would have to supply.
    """
    cs = build_constraint_system(grid)
    v = np.exp(1j * sol.theta)
    p = np.zeros(cs.n_dc_vars)
    p[0::2] = np.maximum(sol.dc_flows, 0.0)
    p[1::2] = np.maximum(-sol.dc_flows, 0.0)
    g = np.zeros((grid.n_buses, 2))
    d = np.zeros((grid.n_buses, 2))
    for u, val in zip(grid.generators, sol.dispatch):
        g[u.bus, 0] += val
    flex = [ld for ld in grid.loads if not ld.is_fixed]
    for ld, val in zip(flex, sol.load_dispatch):
        d[ld.bus, 0] += val
    for ld in grid.loads:
        if ld.is_fixed:
            d[ld.bus, 0] += ld.region.p_min
    mis, _ = balance_residual(grid, cs, v, p, g, d)
    return mis.real, float(np.sum(mis.real))
