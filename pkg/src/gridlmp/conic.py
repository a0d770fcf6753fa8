"""Cone-structured programs and a solver contract returning primal and dual.

A :class:`ConicProgram` maximizes ``c^T x + c0`` over free variables ``x``
subject to blocks ``s = b - A x in K``.  Supported cones:

``zero``      s = 0
``nonneg``    s >= 0
``soc``       s[0] >= ||s[1:]||
``rsoc``      s = (a, b, z...) with a, b >= 0 and a b >= ||z||^2
``hpsd``      Hermitian positive semidefinite matrix of order m, coordinates
              ``[H_00 .. H_mm, Re H_01, Im H_01, Re H_02, ...]`` (pairs a < b
              in lexicographic order), m^2 reals in total.

The dual of each block is ``y in K*`` with ``A^T y = c`` and dual objective
``b^T y + c0``.  For ``hpsd`` the dual matrix is recovered with
:func:`hermitian_from_coords` using ``offdiag_scale=0.5``.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import clarabel
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr, spsolve
from scipy.optimize import linprog

from .errors import PreconditionError

DEFAULT_TOL = 5e-8
CONE_KINDS = ("zero", "nonneg", "soc", "rsoc", "hpsd")
STATUSES = ("optimal", "infeasible", "unbounded", "numerical_failure")
CLARABEL_RETRIES = (
    {},
    {"equilibrate_enable": False},
    {"equilibrate_max_iter": 50},
    {"equilibrate_enable": False, "max_step_fraction": 0.95},
)


@dataclass
class Block:
    kind: str
    A: sp.csr_matrix
    b: np.ndarray
    name: str = ""
    order: int = 0  # matrix order for hpsd blocks

    @property
    def size(self) -> int:
        return self.A.shape[0]


class ConicProgram:
    """Mutable builder; treat as immutable once handed to :func:`solve`."""

    def __init__(self):
        self.n_vars = 0
        self.var_slices: dict[str, slice] = {}
        self._c: list[tuple[int, float]] = []
        self.c0 = 0.0
        self.blocks: list[Block] = []

    # -- variables and objective ------------------------------------------
    def add_variable(self, name: str, size: int) -> slice:
        if name in self.var_slices:
            raise ValueError(f"duplicate variable block {name!r}")
        sl = slice(self.n_vars, self.n_vars + size)
        self.var_slices[name] = sl
        self.n_vars += size
        return sl

    def add_objective(self, index: int, coef: float) -> None:
        self._c.append((index, float(coef)))

    @property
    def c(self) -> np.ndarray:
        out = np.zeros(self.n_vars)
        for i, v in self._c:
            out[i] += v
        return out

    # -- constraints --------------------------------------------------------
    def add_block(self, kind: str, A, b, name: str = "", order: int = 0) -> int:
        if kind not in CONE_KINDS:
            raise ValueError(f"unknown cone {kind!r}")
        A = sp.csr_matrix(A, dtype=float)
        b = np.asarray(b, dtype=float).ravel()
        if A.shape[0] != b.size:
            raise ValueError("row count of A and b differ")
        if A.shape[1] < self.n_vars:
            A = sp.csr_matrix((A.data, A.indices, A.indptr), shape=(A.shape[0], self.n_vars))
        if A.shape[1] != self.n_vars:
            raise ValueError("A references undeclared variables")
        if kind == "rsoc" and b.size < 3:
            raise ValueError("rotated SOC block needs at least 3 entries")
        if kind == "soc" and b.size < 1:
            raise ValueError("SOC block needs at least 1 entry")
        if kind == "hpsd":
            if order < 1 or order * order != b.size:
                raise ValueError("hpsd block size must be order**2")
        self.blocks.append(Block(kind, A, b, name, order))
        return len(self.blocks) - 1

    def stacked(self) -> tuple[sp.csr_matrix, np.ndarray]:
        if not self.blocks:
            return sp.csr_matrix((0, self.n_vars)), np.zeros(0)
        A = sp.vstack([sp.csr_matrix(blk.A, shape=(blk.size, self.n_vars)) for blk in self.blocks])
        return sp.csr_matrix(A), np.concatenate([blk.b for blk in self.blocks])

    @property
    def is_lp(self) -> bool:
        return all(blk.kind in ("zero", "nonneg") for blk in self.blocks)

    def to_dict(self) -> dict:
        """Plain-data dump for debugging with external tools."""
        return {
            "n_vars": self.n_vars,
            "variables": {k: [v.start, v.stop] for k, v in self.var_slices.items()},
            "c": self.c.tolist(),
            "c0": self.c0,
            "blocks": [{"kind": blk.kind, "name": blk.name, "order": blk.order,
                        "A": sp.coo_matrix(blk.A).todense().tolist(), "b": blk.b.tolist()}
                       for blk in self.blocks],
        }


@dataclass
class ConicSolution:
    status: str
    x: Optional[np.ndarray]
    y: list
    primal_objective: float = math.nan
    dual_objective: float = math.nan
    residuals: dict = field(default_factory=dict)
    backend: str = ""
    iterations: int = 0
    solve_time: float = 0.0
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def value(self, prog: ConicProgram, name: str) -> np.ndarray:
        return self.x[prog.var_slices[name]]


# ---------------------------------------------------------------------------
# Coordinate helpers
# ---------------------------------------------------------------------------

def pair_list(m: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(m) for b in range(a + 1, m)]


def hermitian_from_coords(s, m: int, offdiag_scale: float = 1.0) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    H = np.diag(s[:m]).astype(complex)
    for k, (a, b) in enumerate(pair_list(m)):
        val = offdiag_scale * complex(s[m + 2 * k], s[m + 2 * k + 1])
        H[a, b] = val
        H[b, a] = val.conjugate()
    return H


def hermitian_to_coords(H) -> np.ndarray:
    H = np.asarray(H)
    m = H.shape[0]
    out = [H[a, a].real for a in range(m)]
    for a, b in pair_list(m):
        out += [H[a, b].real, H[a, b].imag]
    return np.array(out)


def _rsoc_transform(size: int) -> sp.csr_matrix:
    T = sp.lil_matrix((size, size))
    T[0, 0], T[0, 1], T[1, 0], T[1, 1] = 1.0, 1.0, 1.0, -1.0
    for k in range(2, size):
        T[k, k] = 2.0
    return sp.csr_matrix(T)


def _hpsd_embedding(m: int) -> sp.csr_matrix:
    """Map Hermitian coordinates to the scaled upper-triangle vector of
    the real 2m x 2m matrix [[X, -Y], [Y, X]]."""
    n2 = 2 * m
    tri = [(i, j) for j in range(n2) for i in range(j + 1)]
    index = {pos: k for k, pos in enumerate(tri)}
    E = sp.lil_matrix((len(tri), m * m))
    sqrt2 = math.sqrt(2.0)
    pidx = {pair: k for k, pair in enumerate(pair_list(m))}

    def put(i, j, col, val):
        if i > j:
            i, j = j, i
        scale = 1.0 if i == j else sqrt2
        E[index[(i, j)], col] += scale * val

    for a in range(m):
        put(a, a, a, 1.0)
        put(a + m, a + m, a, 1.0)
    for (a, b), k in pidx.items():
        re, im = m + 2 * k, m + 2 * k + 1
        put(a, b, re, 1.0)              # X_ab
        put(a + m, b + m, re, 1.0)      # X_ab in the lower-right copy
        put(a + m, b, im, 1.0)          # Y_ab
        put(b + m, a, im, -1.0)         # Y_ba = -Y_ab
    return sp.csr_matrix(E)


# ---------------------------------------------------------------------------
# Cone distances
# ---------------------------------------------------------------------------

def cone_violation(kind: str, s: np.ndarray, order: int = 0) -> float:
    """Distance-like measure of how far ``s`` is outside the cone (0 if inside)."""
    if s.size == 0:
        return 0.0
    if kind == "zero":
        return float(np.max(np.abs(s)))
    if kind == "nonneg":
        return float(max(-np.min(s), 0.0))
    if kind == "soc":
        return float(max(np.linalg.norm(s[1:]) - s[0], 0.0))
    if kind == "rsoc":
        a, b, z = s[0], s[1], s[2:]
        return float(max(np.hypot(a - b, 2 * np.linalg.norm(z)) - (a + b), 0.0) / 2)
    if kind == "hpsd":
        return float(max(-np.linalg.eigvalsh(hermitian_from_coords(s, order))[0], 0.0))
    raise ValueError(kind)


def dual_cone_violation(kind: str, y: np.ndarray, order: int = 0) -> float:
    if kind == "zero":
        return 0.0
    if kind == "rsoc":
        y = y.copy()
        y[2:] /= 2.0
        return cone_violation("rsoc", y)
    if kind == "hpsd":
        return float(max(-np.linalg.eigvalsh(hermitian_from_coords(y, order, 0.5))[0], 0.0))
    return cone_violation(kind, y, order)


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------

def solve(prog: ConicProgram, tol: float = DEFAULT_TOL, backend: str = "auto",
          max_iter: int = 200, refine: bool = True) -> ConicSolution:
    """Solve ``prog``; residuals are recomputed from the raw data.

    ``backend`` is ``"highs"`` (LPs only), ``"clarabel"`` or ``"auto"``.
    Status is ``optimal`` only when every recomputed residual is within
    ``tol``.  With ``refine`` the interior-point answer is passed through
    :func:`polish`.
    """
    if backend == "auto":
        backend = "highs" if prog.is_lp else "clarabel"
    start = time.perf_counter()
    if backend == "highs":
        if not prog.is_lp:
            raise PreconditionError("HiGHS backend handles linear programs only")
        sol = _finish(prog, _solve_highs(prog), tol)
    elif backend == "clarabel":
        # Equilibration occasionally stalls or blurs the active set on
        # programs that are already well scaled; retries with other settings
        # are cheap.  A polished optimum is preferred over an unpolished one.
        fallback = None
        for overrides in CLARABEL_RETRIES:
            sol = _solve_clarabel(prog, tol, max_iter, overrides)
            if refine:
                sol = polish(prog, sol)
            sol = _finish(prog, sol, tol)
            if sol.status in ("infeasible", "unbounded") or (sol.optimal and (sol.polished or not refine)):
                break
            if sol.optimal and fallback is None:
                fallback = sol
        else:
            sol = fallback or sol
    else:
        raise ValueError(f"unknown backend {backend!r}")
    sol.solve_time = time.perf_counter() - start
    return sol


def _finish(prog: ConicProgram, sol: ConicSolution, tol: float) -> ConicSolution:
    if sol.x is not None and sol.status in ("optimal", "inaccurate"):
        sol.primal_objective = float(prog.c @ sol.x + prog.c0)
        sol.dual_objective = float(sum(blk.b @ y for blk, y in zip(prog.blocks, sol.y)) + prog.c0)
        sol.residuals = _residuals(prog, sol.x, sol.y)
        ok = all(v <= tol for v in sol.residuals.values())
        sol.status = "optimal" if ok else "numerical_failure"
    return sol


def _solve_highs(prog: ConicProgram) -> ConicSolution:
    c = prog.c
    eq = [blk for blk in prog.blocks if blk.kind == "zero"]
    ub = [blk for blk in prog.blocks if blk.kind == "nonneg"]
    A_eq = sp.vstack([b.A for b in eq]).tocsr() if eq else None
    b_eq = np.concatenate([b.b for b in eq]) if eq else None
    A_ub = sp.vstack([b.A for b in ub]).tocsr() if ub else None
    b_ub = np.concatenate([b.b for b in ub]) if ub else None
    res = linprog(-c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=[(None, None)] * prog.n_vars, method="highs")
    if res.status == 2:
        return ConicSolution("infeasible", None, [], backend="highs", iterations=res.nit)
    if res.status == 3:
        return ConicSolution("unbounded", None, [], backend="highs", iterations=res.nit)
    if res.status != 0:
        return ConicSolution("numerical_failure", None, [], backend="highs", iterations=res.nit)
    y_eq = -np.asarray(res.eqlin.marginals) if eq else np.zeros(0)
    y_ub = -np.asarray(res.ineqlin.marginals) if ub else np.zeros(0)
    ys, ie, iu = [], 0, 0
    for blk in prog.blocks:
        if blk.kind == "zero":
            ys.append(y_eq[ie:ie + blk.size])
            ie += blk.size
        else:
            ys.append(y_ub[iu:iu + blk.size])
            iu += blk.size
    return ConicSolution("inaccurate", np.asarray(res.x), ys, backend="highs", iterations=res.nit)


_USABLE = ("Solved", "AlmostSolved", "MaxIterations", "InsufficientProgress", "NumericalError")


def _solve_clarabel(prog: ConicProgram, tol: float, max_iter: int,
                    overrides: Optional[dict] = None) -> ConicSolution:
    n = prog.n_vars
    c = prog.c
    scale = float(np.max(np.abs(c))) if np.any(c) else 1.0
    mats, rhs, cones, maps = [], [], [], []
    order = {"zero": 0, "nonneg": 1, "soc": 2, "rsoc": 2, "hpsd": 3}
    for bi in sorted(range(len(prog.blocks)), key=lambda k: order[prog.blocks[k].kind]):
        blk = prog.blocks[bi]
        if blk.kind in ("zero", "nonneg", "soc"):
            T = None
            mats.append(blk.A)
            rhs.append(blk.b)
        elif blk.kind == "rsoc":
            T = _rsoc_transform(blk.size)
            mats.append(T @ blk.A)
            rhs.append(T @ blk.b)
        else:
            T = _hpsd_embedding(blk.order)
            mats.append(T @ blk.A)
            rhs.append(T @ blk.b)
        size = mats[-1].shape[0]
        if blk.kind == "zero":
            cones.append(clarabel.ZeroConeT(size))
        elif blk.kind == "nonneg":
            cones.append(clarabel.NonnegativeConeT(size))
        elif blk.kind in ("soc", "rsoc"):
            cones.append(clarabel.SecondOrderConeT(size))
        else:
            cones.append(clarabel.PSDTriangleConeT(2 * blk.order))
        maps.append((bi, T, size))

    A = sp.vstack(mats).tocsc() if mats else sp.csc_matrix((0, n))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    verbose = os.environ.get("GRIDLMP_SOLVER_VERBOSE", "") not in ("", "0")
    best, best_err, status = None, math.inf, ""
    # Tight targets first; a numerical breakdown near the end is retried with
    # looser ones, since polishing recovers the last digits anyway.  The last
    # iterate of a breakdown is kept as a candidate: its residuals are
    # recomputed and judged against ``tol`` like any other answer.
    for inner in (min(tol, 1e-8) * 1e-2, min(tol, 1e-8) * 1e-1, tol * 0.5):
        settings = clarabel.DefaultSettings()
        settings.verbose = verbose
        settings.max_iter = max_iter
        settings.tol_feas = inner
        settings.tol_gap_abs = inner
        settings.tol_gap_rel = inner
        settings.tol_ktratio = 1e-8
        settings.tol_infeas_abs = 1e-10
        settings.tol_infeas_rel = 1e-10
        settings.reduced_tol_feas = tol * 1e-1
        settings.reduced_tol_gap_abs = tol * 1e-1
        settings.reduced_tol_gap_rel = tol * 1e-1
        for key, val in (overrides or {}).items():
            setattr(settings, key, val)
        solver = clarabel.DefaultSolver(sp.csc_matrix((n, n)), -c / scale, A, b, cones, settings)
        out = solver.solve()
        status = str(out.status)
        if "Infeasible" in status:
            break
        if status in _USABLE and np.all(np.isfinite(out.x)) and np.all(np.isfinite(out.z)):
            z = np.asarray(out.z) * scale
            ys: list = [None] * len(prog.blocks)
            pos = 0
            for bi, T, size in maps:
                w = z[pos:pos + size]
                pos += size
                ys[bi] = w if T is None else T.T @ w
            x = np.asarray(out.x)
            err = max(_residuals(prog, x, ys).values())
            if err < best_err:
                best, best_err = ConicSolution("inaccurate", x, ys, backend="clarabel",
                                               iterations=out.iterations), err
        if status in ("Solved", "AlmostSolved"):
            break
    if best is not None and not ("Infeasible" in status and best_err > tol):
        return best
    if "PrimalInfeasible" in status:
        code = "infeasible"
    elif "DualInfeasible" in status:
        code = "unbounded"
    else:
        code = "numerical_failure"
    return ConicSolution(code, None, [], backend="clarabel", iterations=out.iterations)


# ---------------------------------------------------------------------------
# Residuals
# ---------------------------------------------------------------------------

def _residuals(prog: ConicProgram, x: np.ndarray, ys: list) -> dict:
    c = prog.c
    r_p, r_d = 0.0, 0.0
    aty = np.zeros(prog.n_vars)
    b_norm = 0.0
    for blk, y in zip(prog.blocks, ys):
        s = blk.b - blk.A @ x
        r_p = max(r_p, cone_violation(blk.kind, s, blk.order))
        r_d = max(r_d, dual_cone_violation(blk.kind, y, blk.order))
        aty += blk.A.T @ y
        if blk.size:
            b_norm = max(b_norm, float(np.max(np.abs(blk.b))))
    c_norm = float(np.max(np.abs(c))) if c.size else 0.0
    r_d = max(r_d, float(np.max(np.abs(aty - c))) if c.size else 0.0)
    pobj = float(c @ x + prog.c0)
    dobj = float(sum(blk.b @ y for blk, y in zip(prog.blocks, ys)) + prog.c0)
    return {
        "r_primal": r_p / (1.0 + b_norm),
        "r_dual": r_d / (1.0 + c_norm),
        "r_gap": abs(pobj - dobj) / (1.0 + abs(pobj)),
    }


def kkt_residuals(prog: ConicProgram, sol: ConicSolution) -> dict:
    """Recompute primal, dual and gap residuals of an optimal solution.

    ``r_primal`` is the largest cone violation of ``b - A x`` divided by
    ``1 + ||b||_inf``; ``r_dual`` is the larger of ``||A^T y - c||_inf`` and the
    dual-cone violation of ``y``, divided by ``1 + ||c||_inf``;
    ``r_gap = |pobj - dobj| / (1 + |pobj|)``.
    """
    if sol.status != "optimal" or sol.x is None:
        raise PreconditionError(f"residuals need an optimal solution, status is {sol.status}")
    return _residuals(prog, sol.x, sol.y)


# ---------------------------------------------------------------------------
# Active-set polishing
# ---------------------------------------------------------------------------

def _std_transform(blk: Block):
    """Matrix mapping block coordinates to a standard second-order cone."""
    if blk.kind == "rsoc":
        return _rsoc_transform(blk.size)
    return sp.identity(blk.size, format="csr")


def _lstsq(J, r):
    """Least-norm solution of ``J d = r``."""
    if J.shape[0] * J.shape[1] <= 4_000_000:
        return np.linalg.lstsq(J.toarray(), r, rcond=None)[0]
    return lsqr(J, r, atol=1e-16, btol=1e-16, conlim=1e14, iter_lim=20 * max(J.shape))[0]


def complementarity_products(prog: ConicProgram, x, ys) -> np.ndarray:
    """``s_k . y_k`` for every block."""
    return np.array([float((blk.b - blk.A @ x) @ y) for blk, y in zip(prog.blocks, ys)])


def _classify(prog: ConicProgram, x0, y0, thresh: float, weak_active: bool):
    """Active-set guess per block; ``None`` when a cone pair is not complementary."""
    smax = max((float(np.max(np.abs(b.b - b.A @ x0))) for b in prog.blocks if b.size), default=0.0)
    ymax = max((float(np.max(np.abs(y))) for y in y0 if y.size), default=0.0)
    plan = []
    for blk, y in zip(prog.blocks, y0):
        s = blk.b - blk.A @ x0
        if blk.kind == "zero":
            plan.append(("zero", None))
        elif blk.kind == "nonneg":
            sn, yn = s / (1 + smax), y / (1 + ymax)
            act = yn > sn
            if weak_active:
                act |= np.maximum(sn, yn) < 1e-4
            plan.append(("nonneg", act))
        else:
            T = _std_transform(blk)
            ss, w = T @ s, np.asarray(spsolve(T.T.tocsc(), y)).ravel()
            ns, nw = np.linalg.norm(ss) / (1 + smax), np.linalg.norm(w) / (1 + ymax)
            if nw <= thresh * max(ns, 1.0) and nw < ns:
                plan.append(("inactive", T))
            elif ns <= thresh * max(nw, 1.0):
                plan.append(("collapsed", T))
            else:
                r = np.concatenate([[ss[0]], -ss[1:]])
                cosang = float(r @ w) / (np.linalg.norm(r) * np.linalg.norm(w))
                if cosang < 1 - 1e-4:
                    return None
                plan.append(("face", T))
    return plan


def _refine(prog: ConicProgram, x0, y0, plan, iters: int):
    """Gauss-Newton on primal activity and dual stationarity for a fixed plan."""
    n = prog.n_vars
    total = sum(blk.size for blk in prog.blocks)
    offsets = np.cumsum([0] + [blk.size for blk in prog.blocks])

    def primal(x):
        rows, vals = [], []
        for blk, (kind, info) in zip(prog.blocks, plan):
            s = blk.b - blk.A @ x
            if kind in ("zero", "collapsed"):
                rows.append(-blk.A)
                vals.append(s)
            elif kind == "nonneg" and info.any():
                rows.append(-blk.A[info])
                vals.append(s[info])
            elif kind == "face":
                ss = info @ s
                dS = -(info @ blk.A)
                # (s0^2 - |s_bar|^2) / (2 s0), roughly the distance to the boundary
                vals.append(np.array([(ss[0] ** 2 - ss[1:] @ ss[1:]) / (2 * ss[0])]))
                rows.append(sp.csr_matrix((ss[0] * dS[0] - ss[1:] @ dS[1:]) / ss[0]))
        if not rows:
            return sp.csr_matrix((0, n)), np.zeros(0)
        return sp.vstack(rows).tocsr(), np.concatenate(vals)

    # Dual unknowns: free entries, plus one scale t per face with y = t M s(x),
    # M mapping s to its reflection in block coordinates.
    free_idx, theta0, faces = [], [], []
    for bi, (blk, (kind, info), y) in enumerate(zip(prog.blocks, plan, y0)):
        o = offsets[bi]
        if kind in ("zero", "collapsed"):
            free_idx += list(range(o, o + blk.size))
            theta0 += list(y)
        elif kind == "nonneg":
            idx = np.flatnonzero(info)
            free_idx += list(o + idx)
            theta0 += list(y[idx])
        elif kind == "face":
            R = sp.diags(np.r_[1.0, -np.ones(blk.size - 1)])
            M = (info.T @ R @ info).tocsr()
            v = M @ (blk.b - blk.A @ x0)
            faces.append((bi, M))
            theta0.append(float(v @ y) / float(v @ v))
    nfree = len(free_idx)
    P_free = sp.csr_matrix((np.ones(nfree), (free_idx, np.arange(nfree))), shape=(total, nfree))
    A_all = sp.vstack([blk.A for blk in prog.blocks]).tocsr()

    def dual(x, theta):
        y = P_free @ theta[:nfree]
        Yx = sp.lil_matrix((total, n))
        Yt = sp.lil_matrix((total, len(faces)))
        for f, (bi, M) in enumerate(faces):
            blk, o = prog.blocks[bi], offsets[bi]
            v = M @ (blk.b - blk.A @ x)
            t = theta[nfree + f]
            y[o:o + blk.size] += t * v
            Yx[o:o + blk.size, :] = -t * (M @ blk.A)
            Yt[o:o + blk.size, f] = v[:, None]
        return y, sp.hstack([Yx, P_free, Yt]).tocsr()

    x, theta = x0.copy(), np.asarray(theta0, dtype=float)
    scale = 1 + max(np.max(np.abs(x)), np.max(np.abs(theta)) if theta.size else 0.0)
    for _ in range(iters):
        Jp, Fp = primal(x)
        y, Jy = dual(x, theta)
        Fd = A_all.T @ y - prog.c
        J = sp.vstack([sp.hstack([Jp, sp.csr_matrix((Jp.shape[0], theta.size))]),
                       A_all.T @ Jy]).tocsr()
        F = np.concatenate([Fp, Fd])
        if np.max(np.abs(F)) <= 1e-14 * scale:
            break
        step = _lstsq(J, F)
        if np.max(np.abs(step)) > 1e-2 * scale:
            return None
        x, theta = x - step[:n], theta - step[n:]
    ystack, _ = dual(x, theta)
    return x, [ystack[offsets[k]:offsets[k + 1]] for k in range(len(prog.blocks))]


def polish(prog: ConicProgram, sol: ConicSolution, thresh: float = 1e-7,
           iters: int = 6) -> ConicSolution:
    """Refine an interior-point solution on its identified active set.

    Each cone is classified as inactive (``y = 0``), collapsed (``s = 0``) or
    on a common face (``s`` on the boundary, ``y`` along its reflection), and
    the primal-dual pair is driven onto that structure by Gauss-Newton steps.
    Weakly active inequalities are tried both ways.  A refined pair replaces
    the original only if no residual gets worse and complementarity improves.
    """
    if sol.x is None or any(blk.kind == "hpsd" for blk in prog.blocks):
        return sol
    x0, y0 = sol.x, sol.y
    old = _residuals(prog, x0, y0)
    comp_old = float(np.max(np.abs(complementarity_products(prog, x0, y0))))
    for weak_active in (False, True):
        plan = _classify(prog, x0, y0, thresh, weak_active)
        if plan is None:
            return sol
        out = _refine(prog, x0, y0, plan, iters)
        if out is None:
            continue
        x, ys = out
        new = _residuals(prog, x, ys)
        comp_new = float(np.max(np.abs(complementarity_products(prog, x, ys))))
        if all(new[k] <= max(old[k], 1e-13) for k in new) and comp_new < comp_old:
            return ConicSolution(sol.status, x, ys, backend=sol.backend,
                                 iterations=sol.iterations, solve_time=sol.solve_time,
                                 polished=True)
    return sol
