"""Second-order cone relaxation of the welfare-maximizing OPF and its dual read-back.

The relaxation works on a partial Gram matrix: the N diagonal entries of
``V = v v^H`` and the complex entry ``V[i, j]`` of every AC branch.  Each
2x2 principal block on a branch is constrained positive semidefinite through
a rotated second-order cone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import conic
from .errors import (DualReconstructionMismatch, PreconditionError,
                     StrongDualityViolation)
from .grid import (Box, GenSpec, Grid, LoadSpec, PiecewiseLinear, Quadratic, ZERO_FN,
                   scale_objective)
from .matrices import ConstraintSystem, assemble_psi, assemble_psi_vec, build_constraint_system, gram_coefficients

DUAL_IDENTITY_TOL = 1e-5


@dataclass(frozen=True)
class PartialGram:
    """Diagonal and AC-branch entries of a Gram matrix."""

    diag: np.ndarray
    offdiag: np.ndarray

    @classmethod
    def from_vector(cls, n: int, vec) -> "PartialGram":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:n].copy(), vec[n::2] + 1j * vec[n + 1::2])

    @classmethod
    def from_voltages(cls, v, pairs) -> "PartialGram":
        v = np.asarray(v, dtype=complex)
        off = np.array([v[i] * np.conj(v[j]) for i, j in pairs], dtype=complex)
        return cls(np.abs(v) ** 2, off)

    def to_vector(self) -> np.ndarray:
        out = np.empty(self.diag.size + 2 * self.offdiag.size)
        out[: self.diag.size] = self.diag
        out[self.diag.size::2] = self.offdiag.real
        out[self.diag.size + 1::2] = self.offdiag.imag
        return out

    def block(self, k: int, pair: tuple[int, int]) -> np.ndarray:
        i, j = pair
        w = self.offdiag[k]
        return np.array([[self.diag[i], w], [np.conj(w), self.diag[j]]])


@dataclass
class Layout:
    """Variable and block positions inside the conic program."""

    n: int
    pairs: tuple
    units: list            # GenSpec objects: generators then converter support
    n_generators: int
    flex_loads: list       # LoadSpec objects with a non-singleton region
    fixed: np.ndarray      # (N, 2) fixed withdrawal per bus
    fixed_loads: list
    gram: slice = slice(0)
    dc: slice = slice(0)
    unit_vars: list = field(default_factory=list)
    load_vars: list = field(default_factory=list)
    blocks: dict = field(default_factory=dict)
    xi_blocks: list = field(default_factory=list)


@dataclass
class SocrSolution:
    status: str
    W: Optional[PartialGram] = None
    p: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None          # (N, 2) total injection per bus
    d: Optional[np.ndarray] = None          # (N, 2) total withdrawal per bus
    unit_dispatch: Optional[np.ndarray] = None
    load_dispatch: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None        # (N, 2) $/h per p.u.
    mu: Optional[np.ndarray] = None
    lam_k: Optional[np.ndarray] = None      # (E, 2, 2) complex
    nu: Optional[np.ndarray] = None         # multipliers of the DC sign constraints
    objective: float = math.nan
    residuals: dict = field(default_factory=dict)
    base_mva: float = 100.0

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    @property
    def lmp(self) -> np.ndarray:
        """Prices in $/MWh (active) and $/MVArh (reactive)."""
        return self.lam / self.base_mva

    def to_json(self) -> str:
        def enc(val):
            if isinstance(val, PartialGram):
                return {"diag": val.diag.tolist(),
                        "offdiag_re": val.offdiag.real.tolist(),
                        "offdiag_im": val.offdiag.imag.tolist()}
            if isinstance(val, np.ndarray):
                if np.iscomplexobj(val):
                    return {"re": val.real.tolist(), "im": val.imag.tolist()}
                return val.tolist()
            return val
        payload = {k: enc(v) for k, v in self.__dict__.items()}
        return json.dumps(payload, sort_keys=True)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _check_preconditions(grid: Grid) -> None:
    seen = set()
    for br in grid.ac_branches:
        key = frozenset((br.from_bus, br.to_bus))
        if key in seen:
            raise PreconditionError(
                "parallel AC branches share one Gram entry; run merge_parallel_branches first")
        seen.add(key)
    for br in grid.dc_branches:
        if br.p_min > 0 or br.p_max < 0:
            raise PreconditionError(f"DC branch {br.label}: flow range must contain zero")


def converter_units(grid: Grid) -> list[GenSpec]:
    """Zero-cost reactive sources modelling converter support at DC terminals."""
    units = []
    for br in grid.dc_branches:
        if br.q_capability > 0:
            for bus in (br.from_bus, br.to_bus):
                cap = br.q_capability
                units.append(GenSpec(bus, Box(0.0, 0.0, -cap, cap), ZERO_FN, label=br.label))
    return units


class _Rows:
    """Sparse row accumulator for one constraint block."""

    def __init__(self):
        self.r, self.c, self.v, self.b = [], [], [], []

    def add(self, entries, rhs: float) -> None:
        row = len(self.b)
        for col, val in entries:
            if val != 0.0:
                self.r.append(row)
                self.c.append(col)
                self.v.append(val)
        self.b.append(rhs)

    def matrix(self, n_vars: int):
        A = sp.csr_matrix((self.v, (self.r, self.c)), shape=(len(self.b), n_vars))
        return A, np.array(self.b, dtype=float)


class WelfareTerms:
    """Cost and benefit functions as objective terms, with epigraph variables
    for piecewise-linear and quadratic pieces."""

    def __init__(self, prog: conic.ConicProgram):
        self.prog = prog
        self.rows = _Rows()
        self.quad: list = []

    def add(self, fn, p_col: int, sign: float, tag: str) -> None:
        """Add ``sign * fn(P)`` to the objective (sign=-1 for costs, +1 for benefits)."""
        prog = self.prog
        if fn.is_zero:
            return
        if isinstance(fn, Quadratic) and fn.c2 == 0.0:
            prog.add_objective(p_col, sign * fn.c1)
            prog.c0 += sign * fn.c0
            return
        t = prog.add_variable(f"epi_{tag}", 1).start
        prog.add_objective(t, sign)
        if isinstance(fn, PiecewiseLinear):
            for (x, f), s in zip(fn.points[:-1], fn.slopes):
                # cost: t >= f + s (P - x);  benefit: t <= f + s (P - x)
                if sign < 0:
                    self.rows.add([(p_col, s), (t, -1.0)], s * x - f)
                else:
                    self.rows.add([(p_col, -s), (t, 1.0)], f - s * x)
        else:
            root = math.sqrt(abs(fn.c2))
            if sign < 0:   # t - c1 P - c0 >= c2 P^2
                self.quad.append(([(0, p_col, fn.c1), (0, t, -1.0), (2, p_col, -root)],
                                  [-fn.c0, 1.0, 0.0]))
            else:          # c1 P + c0 - t >= |c2| P^2
                self.quad.append(([(0, p_col, -fn.c1), (0, t, 1.0), (2, p_col, -root)],
                                  [fn.c0, 1.0, 0.0]))

    def attach(self) -> None:
        """Add the epigraph blocks; call once all variables exist."""
        nv = self.prog.n_vars
        if self.rows.b:
            A, b = self.rows.matrix(nv)
            self.prog.add_block("nonneg", A, b, "epigraph")
        for entries, rhs in self.quad:
            A = sp.csr_matrix(([v for _, _, v in entries],
                               ([r for r, _, _ in entries], [c for _, c, _ in entries])),
                              shape=(3, nv))
            self.prog.add_block("rsoc", A, rhs, "epigraph_quad")


def build_socr(cs: ConstraintSystem, grid: Grid, full_psd: bool = False):
    """Assemble the relaxation; returns ``(ConicProgram, Layout)``.

    With ``full_psd`` the Gram variable covers every bus pair and a single
    Hermitian PSD cone replaces the per-branch cones (the semidefinite
    relaxation); the remaining rows are unchanged.
    """
    _check_preconditions(grid)
    n = cs.n
    pairs = tuple(conic.pair_list(n)) if full_psd else cs.pairs
    units = list(grid.generators) + converter_units(grid)
    flex = [d for d in grid.loads if not d.is_fixed]
    fixed_loads = [d for d in grid.loads if d.is_fixed]
    fixed = np.zeros((n, 2))
    for d in fixed_loads:
        fixed[d.bus] += (d.region.p_min, d.region.q_min)

    lay = Layout(n=n, pairs=pairs, units=units, n_generators=len(grid.generators),
                 flex_loads=flex, fixed=fixed, fixed_loads=fixed_loads)
    prog = conic.ConicProgram()
    lay.gram = prog.add_variable("W", n + 2 * len(pairs))
    lay.dc = prog.add_variable("dc", cs.n_dc_vars)
    for k, _ in enumerate(units):
        lay.unit_vars.append(prog.add_variable(f"unit{k}", 2).start)
    for k, _ in enumerate(flex):
        lay.load_vars.append(prog.add_variable(f"load{k}", 2).start)

    g0, x0 = lay.gram.start, lay.dc.start

    welfare = WelfareTerms(prog)
    for k, u in enumerate(units):
        welfare.add(u.cost, lay.unit_vars[k], -1.0, f"unit{k}")
    for k, d in enumerate(flex):
        welfare.add(d.benefit, lay.load_vars[k], 1.0, f"load{k}")

    nv = prog.n_vars

    # Power balance: trace(P_n W) + h_n x - g_n + d_n = -d_fixed (rows P0, Q0, P1, ...)
    bal = _Rows()
    coefP = [gram_coefficients(cs.P[k], n, pairs) for k in range(n)]
    coefQ = [gram_coefficients(cs.Q[k], n, pairs) for k in range(n)]
    for bus in range(n):
        for comp, coef in ((0, coefP[bus]), (1, coefQ[bus])):
            entries = [(g0 + c, v) for c, v in enumerate(coef) if v != 0.0]
            if comp == 0:
                entries += [(x0 + c, v) for c, v in enumerate(cs.H[bus]) if v != 0.0]
            entries += [(lay.unit_vars[k] + comp, -1.0) for k, u in enumerate(units) if u.bus == bus]
            entries += [(lay.load_vars[k] + comp, 1.0) for k, d in enumerate(flex) if d.bus == bus]
            bal.add(entries, -fixed[bus, comp])
    A, b = bal.matrix(nv)
    lay.blocks["balance"] = prog.add_block("zero", A, b, "balance")

    # Stacked inequalities (C, c, b)
    ineq = _Rows()
    for row in cs.rows:
        coef = gram_coefficients(row.C, n, pairs) if row.C.nnz else ()
        entries = [(g0 + c, v) for c, v in enumerate(coef) if v != 0.0]
        entries += [(x0 + c, v) for c, v in enumerate(row.c) if v != 0.0]
        ineq.add(entries, row.b)
    A, b = ineq.matrix(nv)
    lay.blocks["ineq"] = prog.add_block("nonneg", A, b, "ineq")

    # DC direction variables are non-negative
    if cs.n_dc_vars:
        dcn = _Rows()
        for c in range(cs.n_dc_vars):
            dcn.add([(x0 + c, -1.0)], 0.0)
        A, b = dcn.matrix(nv)
        lay.blocks["dc_sign"] = prog.add_block("nonneg", A, b, "dc_sign")

    # Injection / withdrawal regions
    reg_eq, reg_ub = _Rows(), _Rows()
    for cols, regions in ((lay.unit_vars, [u.capability for u in units]),
                          (lay.load_vars, [d.region for d in flex])):
        for col, region in zip(cols, regions):
            a_eq, b_eq, a_ub, b_ub = region.linear_constraints()
            for a, rhs in zip(a_eq, b_eq):
                reg_eq.add([(col, a[0]), (col + 1, a[1])], rhs)
            for a, rhs in zip(a_ub, b_ub):
                reg_ub.add([(col, a[0]), (col + 1, a[1])], rhs)
    if reg_eq.b:
        A, b = reg_eq.matrix(nv)
        lay.blocks["region_eq"] = prog.add_block("zero", A, b, "region_eq")
    if reg_ub.b:
        A, b = reg_ub.matrix(nv)
        lay.blocks["region_ub"] = prog.add_block("nonneg", A, b, "region_ub")
    welfare.attach()

    if full_psd:
        m = n + 2 * len(pairs)
        A = sp.csr_matrix((-np.ones(m), (range(m), range(g0, g0 + m))), shape=(m, nv))
        lay.blocks["psd"] = prog.add_block("hpsd", A, np.zeros(m), "psd", order=n)
        return prog, lay

    # One rotated cone per AC branch: (W_ii, W_jj, Re W_ij, Im W_ij)
    for k, (i, j) in enumerate(pairs):
        cols = [g0 + i, g0 + j, g0 + n + 2 * k, g0 + n + 2 * k + 1]
        A = sp.csr_matrix((-np.ones(4), (range(4), cols)), shape=(4, nv))
        lay.xi_blocks.append(prog.add_block("rsoc", A, np.zeros(4), f"xi{k}"))
    return prog, lay


# ---------------------------------------------------------------------------
# Read-back
# ---------------------------------------------------------------------------

def _xi_dual(y) -> np.ndarray:
    a, b, z1, z2 = y
    off = complex(z1, z2) / 2.0
    return np.array([[a, off], [np.conj(off), b]], dtype=complex)


def dual_identity_residuals(cs: ConstraintSystem, lam, mu, lam_k, nu=None) -> dict:
    """Residuals of ``Psi = sum_k S_k Lam_k S_k^T`` on the pattern and of the DC identity."""
    psi = assemble_psi(cs, lam, mu).toarray()
    target = np.zeros((cs.n, cs.n), dtype=complex)
    for k, (i, j) in enumerate(cs.pairs):
        L = lam_k[k]
        target[i, i] += L[0, 0]
        target[j, j] += L[1, 1]
        target[i, j] += L[0, 1]
        target[j, i] += L[1, 0]
    diff = psi - target
    r_herm = float(np.max(np.abs(np.diag(diff)))) if cs.n else 0.0
    for i, j in cs.pairs:
        r_herm = max(r_herm, abs(diff[i, j]))
    psi_vec = assemble_psi_vec(cs, lam, mu)
    nu = np.zeros_like(psi_vec) if nu is None else nu
    r_dc = float(np.max(np.abs(psi_vec - nu))) if psi_vec.size else 0.0
    return {"r_psi": r_herm, "r_psi_dc": r_dc}


def complementarity(W: PartialGram, lam_k, pairs) -> np.ndarray:
    """``trace(Lam_k Xi_k(W))`` per branch."""
    return np.array([float(np.real(np.trace(lam_k[k] @ W.block(k, pair))))
                     for k, pair in enumerate(pairs)])


def extract_solution(prog: conic.ConicProgram, sol: conic.ConicSolution, layout: Layout,
                     cs: ConstraintSystem, base_mva: float = 100.0,
                     check: bool = True) -> SocrSolution:
    """Map primal values and cone duals back onto the model variables."""
    if sol.x is None:
        return SocrSolution(status=sol.status, base_mva=base_mva)
    n = layout.n
    x = sol.x
    W = PartialGram.from_vector(n, x[layout.gram])
    p = x[layout.dc].copy()
    units = np.array([x[c:c + 2] for c in layout.unit_vars]).reshape(-1, 2)
    loads = np.array([x[c:c + 2] for c in layout.load_vars]).reshape(-1, 2)
    g = np.zeros((n, 2))
    d = layout.fixed.copy()
    for u, val in zip(layout.units, units):
        g[u.bus] += val
    for ld, val in zip(layout.flex_loads, loads):
        d[ld.bus] += val
    lam = sol.y[layout.blocks["balance"]].reshape(n, 2)
    mu = sol.y[layout.blocks["ineq"]].copy()
    nu = sol.y[layout.blocks["dc_sign"]].copy() if "dc_sign" in layout.blocks else np.zeros(0)
    lam_k = np.array([_xi_dual(sol.y[b]) for b in layout.xi_blocks]).reshape(-1, 2, 2)

    res = dict(sol.residuals)
    res.update(dual_identity_residuals(cs, lam, mu, lam_k, nu))
    comp = complementarity(W, lam_k, layout.pairs)
    res["complementarity"] = float(np.max(np.abs(comp))) if comp.size else 0.0
    res["dc_simultaneous"] = float(np.max(np.minimum(p[0::2], p[1::2]))) if p.size else 0.0
    out = SocrSolution(status=sol.status, W=W, p=p, g=g, d=d, unit_dispatch=units,
                       load_dispatch=loads, lam=lam, mu=mu, lam_k=lam_k, nu=nu,
                       objective=sol.primal_objective, residuals=res, base_mva=base_mva)
    if check and sol.status == "optimal" and res["r_psi"] > DUAL_IDENTITY_TOL:
        raise DualReconstructionMismatch(f"dual identity residual {res['r_psi']:.3e}")
    return out


# ---------------------------------------------------------------------------
# Surplus / profit and the dual objective
# ---------------------------------------------------------------------------

def _maximize(a: float, b: float, sigma: float, fn, region):
    """max over (P, Q) in region of ``a P + b Q + sigma * fn(P)`` (concave in P)."""
    ps, q_hi, q_lo = region.envelope()
    q_env = q_hi if b >= 0 else q_lo
    lo, hi = float(ps[0]), float(ps[-1])
    cand = set(float(p) for p in ps)
    cand.update(float(x) for x in fn.breakpoints() if lo <= x <= hi)
    knots = sorted(cand)
    if isinstance(fn, Quadratic) and sigma * fn.c2 < 0:
        segs = list(zip(knots[:-1], knots[1:])) or [(lo, hi)]
        for u, w in segs:
            slope = 0.0
            if w > u:
                slope = (np.interp(w, ps, q_env) - np.interp(u, ps, q_env)) / (w - u)
            p_star = -(a + b * slope + sigma * fn.c1) / (2 * sigma * fn.c2)
            cand.add(float(np.clip(p_star, u, w)))
    best, arg = -math.inf, (lo, float(np.interp(lo, ps, q_env)))
    for p in sorted(cand):
        q = float(np.interp(p, ps, q_env))
        val = a * p + b * q + sigma * float(fn(p))
        if val > best:
            best, arg = val, (p, q)
    return best, arg


def profit(lam, gen: GenSpec):
    """Producer profit ``max_{g in G} lam^T g - C(g)`` and its maximizer."""
    return _maximize(float(lam[0]), float(lam[1]), -1.0, gen.cost, gen.capability)


def surplus(lam, load: LoadSpec):
    """Consumer surplus ``max_{d in D} B(d) - lam^T d`` and its maximizer."""
    return _maximize(-float(lam[0]), -float(lam[1]), 1.0, load.benefit, load.region)


def surplus_profit(lam, gen: Optional[GenSpec] = None, load: Optional[LoadSpec] = None):
    """Pair (surplus, profit); a missing element contributes 0."""
    s = surplus(lam, load)[0] if load is not None else 0.0
    pr = profit(lam, gen)[0] if gen is not None else 0.0
    return s, pr


def dual_objective(sol: SocrSolution, cs: ConstraintSystem, grid: Grid,
                   check: bool = True) -> float:
    """Recompute the dual objective from (Lambda, mu) via surplus and profit functions."""
    value = float(sol.mu @ cs.b())
    for u in list(grid.generators) + converter_units(grid):
        value += profit(sol.lam[u.bus], u)[0]
    for ld in grid.loads:
        value += surplus(sol.lam[ld.bus], ld)[0]
    if check and abs(value - sol.objective) > 1e-5 * (1.0 + abs(sol.objective)):
        raise StrongDualityViolation(
            f"dual objective {value:.10g} differs from primal {sol.objective:.10g}")
    return value


def objective_scale(grid: Grid) -> float:
    """Typical marginal value of active power in the grid's cost and benefit data."""
    slopes = [1.0]
    for fn, region in [(u.cost, u.capability) for u in grid.generators] + \
                      [(d.benefit, d.region) for d in grid.loads]:
        for p in (region.p_min if hasattr(region, "p_min") else 0.0,
                  region.p_max if hasattr(region, "p_max") else 0.0):
            slopes.extend(abs(s) for s in fn.subgradient(p))
    return float(max(slopes))


def solve_socr(grid: Grid, tol: float = conic.DEFAULT_TOL,
               cs: Optional[ConstraintSystem] = None, check: bool = True) -> SocrSolution:
    """Build, solve and read back the relaxation of ``grid``.

    Cost and benefit functions are divided by :func:`objective_scale` before
    solving so that prices are of order one; all reported duals and the
    objective are mapped back to the original scale.
    """
    cs = cs or build_constraint_system(grid)
    sigma = objective_scale(grid)
    prog, lay = build_socr(cs, scale_objective(grid, 1.0 / sigma))
    sol = conic.solve(prog, tol=tol)
    out = extract_solution(prog, sol, lay, cs, base_mva=grid.base_mva, check=False)
    if out.W is None:
        return out
    out.lam = out.lam * sigma
    out.mu = out.mu * sigma
    out.lam_k = out.lam_k * sigma
    out.nu = out.nu * sigma
    out.objective = out.objective * sigma
    out.residuals["objective_scale"] = sigma
    out.residuals.update(dual_identity_residuals(cs, out.lam, out.mu, out.lam_k, out.nu))
    comp = complementarity(out.W, out.lam_k, cs.pairs)
    out.residuals["complementarity"] = float(np.max(np.abs(comp))) if comp.size else 0.0
    if check and out.optimal and out.residuals["r_psi"] > DUAL_IDENTITY_TOL:
        raise DualReconstructionMismatch(f"dual identity residual {out.residuals['r_psi']:.3e}")
    return out
