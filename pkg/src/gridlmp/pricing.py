"""Exactness certificates, voltage recovery and LMP reporting for relaxation solutions."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import conic
from .errors import (CertificateInconsistency, DisconnectedAcSubgraph, SubdifferentialViolation,
                     ZeroDenominator)
from .grid import Box, Grid
from .matrices import ConstraintSystem, assemble_psi, build_constraint_system, quad_form
from .socr import PartialGram, SocrSolution, dual_objective, solve_socr

RANK_TOL = 1e-6
MARGIN_REL_TOL = 1e-5
EXACT_TOL = 1e-6
REPORT_SCHEMA = 1


# ---------------------------------------------------------------------------
# Rank, recovery and relaxation error
# ---------------------------------------------------------------------------

def rank_condition(W: PartialGram, pairs, tol: float = RANK_TOL) -> list[dict]:
    """Eigenvalues of every branch block and whether it is numerically rank one."""
    floor = 1e-12 * float(np.max(W.diag)) if W.diag.size else 1e-12
    out = []
    for k, pair in enumerate(pairs):
        lo, hi = np.linalg.eigvalsh(W.block(k, pair))
        ratio = max(lo, 0.0) / max(hi, floor)
        out.append({"lambda1": float(hi), "lambda2": float(lo), "ratio": float(ratio),
                    "passed": bool(ratio <= tol)})
    return out


def recover_voltages(W: PartialGram, pairs, n: int, reference_bus: int = 0) -> np.ndarray:
    """Magnitudes from the diagonal, angles by traversing the AC subgraph.

    On meshed AC subgraphs the breadth-first tree is used; off-tree branches
    are not enforced (see :func:`relaxation_error`).
    """
    adj: dict[int, list[tuple[int, int]]] = {b: [] for b in range(n)}
    for k, (i, j) in enumerate(pairs):
        adj[i].append((j, k))
        adj[j].append((i, k))
    theta = np.full(n, np.nan)
    theta[reference_bus] = 0.0
    queue = deque([reference_bus])
    while queue:
        a = queue.popleft()
        for b, k in adj[a]:
            if not np.isnan(theta[b]):
                continue
            phase = float(np.angle(W.offdiag[k]))
            i, _ = pairs[k]
            # theta_i - theta_j = arg W_ij
            theta[b] = theta[a] - phase if a == i else theta[a] + phase
            queue.append(b)
    if np.isnan(theta).any():
        raise DisconnectedAcSubgraph(f"buses {np.flatnonzero(np.isnan(theta)).tolist()} unreachable")
    return np.sqrt(np.maximum(W.diag, 0.0)) * np.exp(1j * theta)


def relaxation_error(W: PartialGram, v, pairs, floor: float = 1e-12):
    """``kappa_k = |(v_i v_j* - W_ij) / (v_i v_j*)|`` with mean and maximum."""
    v = np.asarray(v, dtype=complex)
    kap = []
    for k, (i, j) in enumerate(pairs):
        prod = v[i] * np.conj(v[j])
        if abs(prod) < floor:
            raise ZeroDenominator(f"|v_i v_j*| vanishes on branch {k}")
        kap.append(abs((prod - W.offdiag[k]) / prod))
    kap = np.array(kap)
    if kap.size == 0:
        return kap, 0.0, 0.0
    return kap, float(kap.mean()), float(kap.max())


# ---------------------------------------------------------------------------
# Dual-side certificates
# ---------------------------------------------------------------------------

def subspace_margins(cs: ConstraintSystem, lam, mu) -> np.ndarray:
    """``|[Psi(lam, mu)]_{i j}|`` for every AC branch."""
    psi = assemble_psi(cs, lam, mu)
    return np.array([abs(psi[i, j]) for i, j in cs.pairs])


def margin_threshold(cs: ConstraintSystem, lam, mu, rel_tol: float = MARGIN_REL_TOL) -> float:
    psi = assemble_psi(cs, lam, mu)
    top = float(np.max(np.abs(psi.data))) if psi.nnz else 0.0
    return rel_tol * max(top, 1e-12)


def safe_sign_flags(lam, pairs, threshold: float = 0.0, sign_tol: float = 0.0) -> np.ndarray:
    """Branches whose end-bus prices are non-negative with a positive active sum."""
    lam = np.asarray(lam, dtype=float)
    flags = []
    for i, j in pairs:
        nonneg = bool(np.all(lam[i] >= -sign_tol) and np.all(lam[j] >= -sign_tol))
        flags.append(nonneg and lam[i, 0] + lam[j, 0] > threshold)
    return np.array(flags, dtype=bool)


def pathological_verdict(margins, tol: float) -> dict:
    branches = [int(k) for k in np.flatnonzero(np.asarray(margins) <= tol)]
    return {"pathological": bool(branches), "branches": branches}


def lambda_k_zero_check(sol: SocrSolution, cs: ConstraintSystem, margins, margin_tol: float,
                        tol: float = 1e-6, raise_on_error: bool = True) -> list[dict]:
    """Inside the critical subspace the branch dual must vanish; outside, its
    off-diagonal must equal the matching entry of Psi."""
    psi = assemble_psi(cs, sol.lam, sol.mu)
    out = []
    for k, (i, j) in enumerate(cs.pairs):
        L = sol.lam_k[k]
        if margins[k] <= margin_tol:
            err = float(np.max(np.abs(L)))
            kind = "zero"
        else:
            err = abs(L[0, 1] - psi[i, j])
            kind = "offdiag"
        ok = err <= tol
        out.append({"branch": k, "check": kind, "error": float(err), "passed": bool(ok)})
        if not ok and raise_on_error:
            raise CertificateInconsistency(f"branch {k}: {kind} check off by {err:.3e}")
    return out


def subspace_dimension(cs: ConstraintSystem, k: int, tol: float = 1e-10) -> dict:
    """Rank of the 2 x (2N + M) matrix of branch-k entries and the subspace dimension."""
    i, j = cs.pairs[k]
    entries = []
    for n in range(cs.n):
        entries += [cs.P[n][i, j], cs.Q[n][i, j]]
    entries += [row.C[i, j] if row.C.nnz else 0.0 for row in cs.rows]
    entries = np.asarray(entries, dtype=complex)
    L = np.vstack([entries.real, entries.imag])
    sv = np.linalg.svd(L, compute_uv=False)
    rank = int(np.sum(sv > tol * max(sv[0], 1e-300))) if sv.size else 0
    total = 2 * cs.n + cs.n_rows
    return {"rank": rank, "dim": total - rank, "ambient": total}


# ---------------------------------------------------------------------------
# Primal-side checks
# ---------------------------------------------------------------------------

def balance_residual(grid: Grid, cs: ConstraintSystem, v, p, g, d) -> tuple[np.ndarray, float]:
    """Per-bus complex power mismatch in MVA and its mean magnitude."""
    v = np.asarray(v, dtype=complex)
    p = np.zeros(cs.n_dc_vars) if p is None else np.asarray(p, dtype=float)
    net = np.asarray(g, dtype=float) - np.asarray(d, dtype=float)
    mis = np.empty(cs.n, dtype=complex)
    for n in range(cs.n):
        re = quad_form(cs.P[n], v) + cs.H[n] @ p - net[n, 0]
        im = quad_form(cs.Q[n], v) - net[n, 1]
        mis[n] = complex(re, im) * grid.base_mva
    return mis, float(np.mean(np.abs(mis))) if mis.size else 0.0


def lmp_subdifferential_check(sol: SocrSolution, grid: Grid, bound_tol: float = 1e-6,
                              rel_tol: float = 1e-5, raise_on_error: bool = True) -> list[dict]:
    """Bus prices must lie in the subdifferential of each generator's cost at its dispatch."""
    scale = 1.0 + float(np.max(np.abs(sol.lam))) if sol.lam.size else 1.0
    tol = rel_tol * scale
    out = []
    for k, gen in enumerate(grid.generators):
        P, Q = sol.unit_dispatch[k]
        lam = sol.lam[gen.bus]
        rec = {"generator": k, "label": gen.label, "P": float(P), "Q": float(Q)}
        if not isinstance(gen.capability, Box):
            rec.update(checked=False, passed=True)
            out.append(rec)
            continue
        box = gen.capability
        left, right = gen.cost.subgradient(P)
        at_hi = P >= box.p_max - bound_tol
        at_lo = P <= box.p_min + bound_tol
        lo_p = left if at_hi or not at_lo else -math.inf
        hi_p = right if at_lo or not at_hi else math.inf
        if at_hi and at_lo:
            lo_p, hi_p = -math.inf, math.inf
        q_hi = Q >= box.q_max - bound_tol
        q_lo = Q <= box.q_min + bound_tol
        lo_q = -math.inf if q_lo else 0.0
        hi_q = math.inf if q_hi else 0.0
        ok_p = lo_p - tol <= lam[0] <= hi_p + tol
        ok_q = lo_q - tol <= lam[1] <= hi_q + tol
        rec.update(checked=True, active_interval=(lo_p, hi_p), reactive_interval=(lo_q, hi_q),
                   passed=bool(ok_p and ok_q))
        out.append(rec)
        if raise_on_error and not rec["passed"]:
            raise SubdifferentialViolation(
                f"generator {gen.label}: price {lam} outside [{lo_p}, {hi_p}] x [{lo_q}, {hi_q}]")
    return out


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class PricingReport:
    status: str
    exact: bool = False
    lmp_p: Optional[np.ndarray] = None        # $/MWh, only when exact
    lmp_q: Optional[np.ndarray] = None
    dual_p: Optional[np.ndarray] = None       # raw duals in $/MWh regardless of verdict
    dual_q: Optional[np.ndarray] = None
    kappa: Optional[np.ndarray] = None
    kappa_mean: float = math.nan
    kappa_max: float = math.nan
    rank_ratio: Optional[np.ndarray] = None
    margins: Optional[np.ndarray] = None
    margin_tol: float = math.nan
    safe_sign: Optional[np.ndarray] = None
    pathological: bool = False
    pathological_branches: list = field(default_factory=list)
    recovered_v: Optional[np.ndarray] = None
    balance_mismatch: Optional[np.ndarray] = None
    balance_mean_mva: float = math.nan
    objective: float = math.nan
    dual_objective: float = math.nan
    residuals: dict = field(default_factory=dict)
    bus_labels: list = field(default_factory=list)
    base_mva: float = 100.0
    solution: Optional[SocrSolution] = None

    @property
    def safe_sign_fraction(self) -> float:
        if self.safe_sign is None or self.safe_sign.size == 0:
            return math.nan
        return float(np.mean(self.safe_sign))

    def to_dict(self) -> dict:
        def arr(x):
            if x is None:
                return None
            x = np.asarray(x)
            if np.iscomplexobj(x):
                return {"re": x.real.tolist(), "im": x.imag.tolist()}
            return x.tolist()

        return {
            "schema": REPORT_SCHEMA,
            "status": self.status,
            "exact": self.exact,
            "lmp_p": arr(self.lmp_p), "lmp_q": arr(self.lmp_q),
            "dual_p": arr(self.dual_p), "dual_q": arr(self.dual_q),
            "dual_p_pu": arr(None if self.dual_p is None else self.dual_p * self.base_mva),
            "dual_q_pu": arr(None if self.dual_q is None else self.dual_q * self.base_mva),
            "kappa_mean": self.kappa_mean, "kappa_max": self.kappa_max,
            "kappa": arr(self.kappa), "rank_ratio": arr(self.rank_ratio),
            "margins": arr(self.margins), "margin_tol": self.margin_tol,
            "safe_sign": arr(self.safe_sign), "safe_sign_fraction": self.safe_sign_fraction,
            "pathological": self.pathological,
            "pathological_branches": self.pathological_branches,
            "recovered_v": arr(self.recovered_v),
            "balance_mismatch_mva": arr(self.balance_mismatch),
            "balance_mean_mva": self.balance_mean_mva,
            "objective": self.objective, "dual_objective": self.dual_objective,
            "residuals": self.residuals,
            "bus_ids": self.bus_labels,
            "base_mva": self.base_mva,
        }

    def to_json(self) -> str:
        return json.dumps(_finite(self.to_dict()), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        """Columns: bus_id, lmp_p, lmp_q, v_mag, v_ang (prices blank when inexact)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bus_id", "lmp_p", "lmp_q", "v_mag", "v_ang"])
        n = len(self.bus_labels)
        for k in range(n):
            lp = "" if self.lmp_p is None else repr(float(self.lmp_p[k]))
            lq = "" if self.lmp_q is None else repr(float(self.lmp_q[k]))
            if self.recovered_v is None:
                vm = va = ""
            else:
                vm = repr(float(abs(self.recovered_v[k])))
                va = repr(float(np.angle(self.recovered_v[k])))
            w.writerow([self.bus_labels[k], lp, lq, vm, va])
        return buf.getvalue()


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def certify(sol: SocrSolution, cs: ConstraintSystem, grid: Grid,
            rank_tol: float = RANK_TOL, margin_rel_tol: float = MARGIN_REL_TOL,
            exact_tol: float = EXACT_TOL) -> PricingReport:
    """Run every exactness witness on a solved relaxation and assemble the report."""
    labels = [b.label or (k + 1) for k, b in enumerate(grid.buses)]
    rep = PricingReport(status=sol.status, bus_labels=labels, base_mva=grid.base_mva, solution=sol)
    if not sol.optimal:
        return rep
    rep.objective = sol.objective
    rep.residuals = dict(sol.residuals)
    rep.dual_objective = dual_objective(sol, cs, grid, check=False)
    rep.residuals["duality_gap"] = abs(rep.dual_objective - sol.objective) / (1 + abs(sol.objective))
    rep.dual_p, rep.dual_q = sol.lmp[:, 0].copy(), sol.lmp[:, 1].copy()

    ranks = rank_condition(sol.W, cs.pairs, rank_tol)
    rep.rank_ratio = np.array([r["ratio"] for r in ranks])
    rep.margins = subspace_margins(cs, sol.lam, sol.mu)
    rep.margin_tol = margin_threshold(cs, sol.lam, sol.mu, margin_rel_tol)
    sign_tol = 1e-9 * (1.0 + float(np.max(np.abs(sol.lam))))
    rep.safe_sign = safe_sign_flags(sol.lam, cs.pairs, threshold=sign_tol, sign_tol=sign_tol)
    verdict = pathological_verdict(rep.margins, rep.margin_tol)
    rep.pathological = verdict["pathological"]
    rep.pathological_branches = verdict["branches"]

    v = recover_voltages(sol.W, cs.pairs, cs.n, grid.reference_bus)
    rep.recovered_v = v
    rep.kappa, rep.kappa_mean, rep.kappa_max = relaxation_error(sol.W, v, cs.pairs)
    rep.balance_mismatch, rep.balance_mean_mva = balance_residual(grid, cs, v, sol.p, sol.g, sol.d)

    ranks_ok = all(r["passed"] for r in ranks)
    # Margins certify rank one branch by branch; the rank test decides where they
    # do not, and kappa guards against inconsistent angles around AC cycles.
    rep.exact = bool((not rep.pathological or ranks_ok) and rep.kappa_max <= exact_tol)
    if rep.exact:
        rep.lmp_p, rep.lmp_q = rep.dual_p, rep.dual_q
    return rep


def price(grid: Grid, tol: float = conic.DEFAULT_TOL, **kwargs) -> PricingReport:
    """Solve the relaxation of ``grid`` and certify its duals as LMPs."""
    cs = build_constraint_system(grid)
    sol = solve_socr(grid, tol=tol, cs=cs)
    return certify(sol, cs, grid, **kwargs)
