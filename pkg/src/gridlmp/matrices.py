"""Hermitian constraint matrices, DC-flow maps and the dual maps Psi / psi.

Conventions
-----------
``V = v v^H`` so that ``V[i, j] = v_i * conj(v_j)`` and every quadratic
constraint reads ``v^H C v = trace(C V)``.  All matrices are stored as
``scipy.sparse.csr_matrix`` with complex entries.

DC branch ``d`` from bus i to bus j carries two non-negative variables
``x[2d] = p+`` (i -> j) and ``x[2d+1] = p-`` (j -> i).  ``h[n] @ x`` is the
active power withdrawn from bus n by DC branches, so the power balance reads
``trace(P_n V) + h_n^T x = (g - d)_P``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import AngleRangeOutOfDomain, DimensionMismatch, ZeroImpedanceBranch
from .grid import AcBranch, Grid

# Row kinds in stacking order.  Each tuple entry: (kind, element kind).
ROW_KINDS = (
    ("v_lo", "bus"), ("v_hi", "bus"),
    ("i_out", "ac"), ("i_in", "ac"),
    ("drop_lo", "ac"), ("drop_hi", "ac"),
    ("ang_center", "ac"), ("ang_lo", "ac"), ("ang_hi", "ac"),
    ("dc_rev", "dc"), ("dc_fwd", "dc"),
)


def _herm(n: int, entries: dict) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for (a, b), val in entries.items():
        rows.append(a)
        cols.append(b)
        vals.append(val)
    return sp.csr_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n))


def unit_matrix(n: int, i: int) -> sp.csr_matrix:
    """``M_i = e_i e_i^T``."""
    return _herm(n, {(i, i): 1.0})


def branch_terms(br: AcBranch) -> tuple[complex, complex, complex, complex]:
    """(Yff, Yft, Ytf, Ytt) of the pi-model so that I_from = Yff v_i + Yft v_j."""
    if br.r == 0.0 and br.x == 0.0:
        raise ZeroImpedanceBranch(f"AC branch {br.label} has zero series impedance")
    y = 1.0 / complex(br.r, br.x)
    tau = br.tap * complex(math.cos(br.shift), math.sin(br.shift))
    ysh = complex(0.0, br.b / 2.0)
    return (y + ysh) / br.tap ** 2, -y / tau.conjugate(), -y / tau, y + ysh


def build_admittance(grid: Grid) -> sp.csr_matrix:
    """Bus admittance matrix of the AC subgrid (bus shunts on the diagonal)."""
    n = grid.n_buses
    rows, cols, vals = [], [], []
    for br in grid.ac_branches:
        i, j = br.from_bus, br.to_bus
        yff, yft, ytf, ytt = branch_terms(br)
        rows += [i, i, j, j]
        cols += [i, j, i, j]
        vals += [yff, yft, ytf, ytt]
    for k, bus in enumerate(grid.buses):
        if bus.g_shunt or bus.b_shunt:
            rows.append(k)
            cols.append(k)
            vals.append(complex(bus.g_shunt, bus.b_shunt))
    return sp.csr_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n))


def injection_matrices(Y: sp.spmatrix) -> tuple[list, list]:
    """Active and reactive injection matrices ``P_n`` and ``Q_n`` for every bus."""
    Y = sp.csr_matrix(Y)
    n = Y.shape[0]
    P, Q = [], []
    for k in range(n):
        row = Y.getrow(k).tocoo()
        # M_k Y has Y's row k in row k; Y^H M_k has its conjugate in column k.
        my = {(k, int(c)): complex(v) for c, v in zip(row.col, row.data)}
        ymh = {(int(c), k): complex(v).conjugate() for c, v in zip(row.col, row.data)}
        keys = set(my) | set(ymh)
        p_ent = {key: (ymh.get(key, 0) + my.get(key, 0)) / 2 for key in keys}
        q_ent = {key: (ymh.get(key, 0) - my.get(key, 0)) / 2j for key in keys}
        P.append(_herm(n, p_ent))
        Q.append(_herm(n, q_ent))
    return P, Q


def _check_angles(br: AcBranch) -> None:
    lim = math.pi / 2
    if not (-lim < br.ang_lo <= br.ang_hi < lim):
        raise AngleRangeOutOfDomain(
            f"AC branch {br.label}: angle range [{br.ang_lo}, {br.ang_hi}] not inside (-pi/2, pi/2)")


def branch_matrices(n: int, br: AcBranch) -> dict[str, sp.csr_matrix]:
    """Current, voltage-drop and angle-difference matrices of one AC branch."""
    _check_angles(br)
    i, j = br.from_bus, br.to_bus
    yff, yft, ytf, ytt = branch_terms(br)

    def outer(a, b):
        # y y^H for y = conj(a) e_i + conj(b) e_j, so that y^H v = a v_i + b v_j.
        ya, yb = a.conjugate(), b.conjugate()
        return _herm(n, {(i, i): ya * ya.conjugate(), (i, j): ya * yb.conjugate(),
                         (j, i): yb * ya.conjugate(), (j, j): yb * yb.conjugate()})

    hi_ratio = max(1.0 - br.drop_hi, 0.0) ** 2
    lo_ratio = (1.0 - br.drop_lo) ** 2
    R = {(i, j): 0.5, (j, i): 0.5}
    S = {(i, j): 0.5j, (j, i): -0.5j}
    t_hi, t_lo = math.tan(br.ang_hi), math.tan(br.ang_lo)
    return {
        "i_out": outer(yff, yft),
        "i_in": outer(ytf, ytt),
        "drop_hi": _herm(n, {(i, i): hi_ratio, (j, j): -1.0}),
        "drop_lo": _herm(n, {(i, i): -lo_ratio, (j, j): 1.0}),
        "ang_center": _herm(n, {key: -val for key, val in R.items()}),
        "ang_hi": _herm(n, {key: S[key] - t_hi * R[key] for key in R}),
        "ang_lo": _herm(n, {key: t_lo * R[key] - S[key] for key in R}),
    }


def build_dc_maps(grid: Grid) -> np.ndarray:
    """Matrix ``H`` (N x 2D) whose row n is ``h_n``: DC withdrawal at bus n."""
    H = np.zeros((grid.n_buses, 2 * grid.n_dc))
    for d, br in enumerate(grid.dc_branches):
        eta = br.efficiency
        H[br.from_bus, 2 * d] += 1.0
        H[br.from_bus, 2 * d + 1] += -eta
        H[br.to_bus, 2 * d] += -eta
        H[br.to_bus, 2 * d + 1] += 1.0
    return H


def dc_injection(grid: Grid, x) -> np.ndarray:
    """Active power injected into each bus by the DC branches."""
    return -build_dc_maps(grid) @ np.asarray(x, dtype=float)


@dataclass(frozen=True)
class Row:
    kind: str
    element: int
    C: sp.csr_matrix
    c: np.ndarray
    b: float


@dataclass
class ConstraintSystem:
    """All matrices of the system model plus the stacked inequality rows."""

    n: int
    pairs: tuple[tuple[int, int], ...]
    Y: sp.csr_matrix
    P: list
    Q: list
    branch: list
    H: np.ndarray
    rows: list = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_dc_vars(self) -> int:
        return self.H.shape[1]

    def M(self, i: int) -> sp.csr_matrix:
        return unit_matrix(self.n, i)

    def row_index(self, kind: str, element: int) -> int:
        for m, row in enumerate(self.rows):
            if row.kind == kind and row.element == element:
                return m
        raise KeyError((kind, element))

    def evaluate_rows(self, V, x=None) -> np.ndarray:
        """``trace(C_m V) + c_m^T x`` for every row (V full Hermitian or a vector v)."""
        V = _as_gram(V)
        x = np.zeros(self.n_dc_vars) if x is None else np.asarray(x, dtype=float)
        return np.array([trace_real(r.C, V) + r.c @ x for r in self.rows])

    def b(self) -> np.ndarray:
        return np.array([r.b for r in self.rows])


def _as_gram(V) -> np.ndarray:
    V = np.asarray(V, dtype=complex)
    if V.ndim == 1:
        return np.outer(V, V.conj())
    return V


def trace_real(C: sp.spmatrix, V: np.ndarray) -> float:
    """``Re trace(C V)`` for sparse Hermitian C and dense V."""
    coo = C.tocoo()
    return float(np.real(np.sum(coo.data * V[coo.col, coo.row])))


def quad_form(C: sp.spmatrix, v) -> float:
    v = np.asarray(v, dtype=complex)
    return float(np.real(v.conj() @ (C @ v)))


def build_constraint_system(grid: Grid) -> ConstraintSystem:
    """Build every matrix family and stack the ``2N + 7E + 2D`` inequality rows."""
    n = grid.n_buses
    Y = build_admittance(grid)
    P, Q = injection_matrices(Y)
    branch = [branch_matrices(n, br) for br in grid.ac_branches]
    H = build_dc_maps(grid)
    nx = H.shape[1]
    zero_c = np.zeros(nx)
    empty = sp.csr_matrix((n, n), dtype=complex)

    rows: list[Row] = []
    for k, bus in enumerate(grid.buses):
        rows.append(Row("v_lo", k, -unit_matrix(n, k), zero_c, -bus.v_min ** 2))
    for k, bus in enumerate(grid.buses):
        rows.append(Row("v_hi", k, unit_matrix(n, k), zero_c, bus.v_max ** 2))
    for kind in ("i_out", "i_in"):
        attr = "i_max_from" if kind == "i_out" else "i_max_to"
        for k, br in enumerate(grid.ac_branches):
            rows.append(Row(kind, k, branch[k][kind], zero_c, getattr(br, attr) ** 2))
    for kind in ("drop_lo", "drop_hi", "ang_center", "ang_lo", "ang_hi"):
        for k in range(grid.n_ac):
            rows.append(Row(kind, k, branch[k][kind], zero_c, 0.0))
    for d, br in enumerate(grid.dc_branches):
        c = np.zeros(nx)
        c[2 * d + 1] = 1.0
        rows.append(Row("dc_rev", d, empty, c, max(-br.p_min, 0.0)))
    for d, br in enumerate(grid.dc_branches):
        c = np.zeros(nx)
        c[2 * d] = 1.0
        rows.append(Row("dc_fwd", d, empty, c, max(br.p_max, 0.0)))

    pairs = tuple((br.from_bus, br.to_bus) for br in grid.ac_branches)
    return ConstraintSystem(n=n, pairs=pairs, Y=Y, P=P, Q=Q, branch=branch, H=H, rows=rows)


def gram_coefficients(C: sp.spmatrix, n: int, pairs) -> np.ndarray:
    """Real coefficients of ``trace(C V)`` in the Gram coordinates.

    Coordinates are ``[V_00 .. V_nn, Re V_p0, Im V_p0, Re V_p1, ...]`` for the
    oriented pairs ``p = (i, j)``.  Entries of C outside the pattern raise.
    """
    out = np.zeros(n + 2 * len(pairs))
    pos = {pair: k for k, pair in enumerate(pairs)}
    coo = sp.coo_matrix(C)
    for a, b, val in zip(coo.row, coo.col, coo.data):
        if val == 0:
            continue
        if a == b:
            out[a] += val.real
            continue
        if (a, b) in pos:
            k = pos[(a, b)]
            out[n + 2 * k] += 2.0 * val.real
            out[n + 2 * k + 1] += 2.0 * val.imag
        elif (b, a) not in pos:
            raise DimensionMismatch(f"matrix entry ({a}, {b}) outside the Gram pattern")
    return out


def assemble_psi(cs: ConstraintSystem, lam, mu) -> sp.csr_matrix:
    """``Psi = sum_n (lam_n1 P_n + lam_n2 Q_n) + sum_m mu_m C_m``."""
    lam, mu = _check_dual_shapes(cs, lam, mu)
    psi = sp.csr_matrix((cs.n, cs.n), dtype=complex)
    for k in range(cs.n):
        if lam[k, 0]:
            psi = psi + lam[k, 0] * cs.P[k]
        if lam[k, 1]:
            psi = psi + lam[k, 1] * cs.Q[k]
    for m, row in enumerate(cs.rows):
        if mu[m] and row.C.nnz:
            psi = psi + mu[m] * row.C
    return sp.csr_matrix(psi)


def assemble_psi_vec(cs: ConstraintSystem, lam, mu) -> np.ndarray:
    """``psi = sum_n lam_n1 h_n + sum_m mu_m c_m`` over the DC variables."""
    lam, mu = _check_dual_shapes(cs, lam, mu)
    out = cs.H.T @ lam[:, 0]
    for m, row in enumerate(cs.rows):
        if mu[m]:
            out = out + mu[m] * row.c
    return out


def _check_dual_shapes(cs, lam, mu):
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if lam.shape != (cs.n, 2):
        raise DimensionMismatch(f"expected Lambda of shape ({cs.n}, 2), got {lam.shape}")
    if mu.shape != (cs.n_rows,):
        raise DimensionMismatch(f"expected mu of length {cs.n_rows}, got {mu.shape}")
    return lam, mu
