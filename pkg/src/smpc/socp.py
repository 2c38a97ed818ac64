"""Assembly of the soft-constrained second-order cone program.

Decision vector layout::

    [ v | m | z | eps_mean | eps_var | g ]

``m`` holds the entries of the block strictly-lower-triangular feedback
matrix ``M`` that are allowed to be nonzero, in column-major order.  ``z``
holds the dual multipliers of the saturated-disturbance box that certify
the hard input bounds.  ``g`` is the epigraph variable of the quadratic
part of the cost.

The conic form is ``min c'x  s.t.  A x = b,  G x + s = h,  s in K`` with
``K`` a product of a nonnegative orthant (first ``dims.l`` rows) and
second-order cones ``{(t, y): ||y|| <= t}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .chance import TightenedStateConstraint
from .horizon import HorizonOperators
from .model import Polytope, WeightSpec
from .saturation import SaturationMoments


# ---------------------------------------------------------------------------
# conic container


@dataclass(frozen=True)
class ConeDims:
    l: int
    q: tuple[int, ...] = ()

    @property
    def m(self) -> int:
        return self.l + sum(self.q)

    @property
    def degree(self) -> int:
        return self.l + len(self.q)


@dataclass
class ConicProgram:
    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    G: sp.csc_matrix
    h: np.ndarray
    dims: ConeDims
    var_blocks: dict = field(default_factory=dict)
    eq_labels: list = field(default_factory=list)
    cone_labels: list = field(default_factory=list)
    offset: float = 0.0

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, x) -> float:
        return float(self.c @ x) + self.offset

    def cone_membership(self, x, tol: float = 1e-9) -> float:
        """Largest violation of ``A x = b`` and ``h - G x in K`` (0 if feasible)."""
        x = np.asarray(x, dtype=float)
        viol = 0.0
        if self.A.shape[0]:
            viol = max(viol, float(np.max(np.abs(self.A @ x - self.b))))
        s = self.h - self.G @ x
        if self.dims.l:
            viol = max(viol, float(max(0.0, -np.min(s[: self.dims.l]))))
        pos = self.dims.l
        for q in self.dims.q:
            blk = s[pos:pos + q]
            viol = max(viol, float(max(0.0, np.linalg.norm(blk[1:]) - blk[0])))
            pos += q
        return viol

    def validate(self) -> None:
        n = self.n
        if self.A.shape != (self.b.size, n) or self.G.shape != (self.h.size, n):
            raise ValueError("conic program data dimensions are inconsistent")
        if self.dims.m != self.h.size:
            raise ValueError("cone dimensions do not cover the cone rows")
        covered = np.zeros(n, dtype=bool)
        for sl in self.var_blocks.values():
            if sl.start < 0 or sl.stop > n:
                raise ValueError("variable block outside the decision vector")
            covered[sl] = True
        if self.var_blocks and not covered.all():
            raise ValueError("decision indices missing from the layout")


# ---------------------------------------------------------------------------
# layout


@dataclass(frozen=True)
class DecisionLayout:
    N: int
    n_x: int
    n_u: int
    s: int
    r: int
    a: int
    m_rows: np.ndarray
    m_cols: np.ndarray
    z_rows: np.ndarray
    z_cols: np.ndarray
    soft: bool = True

    @property
    def n_v(self) -> int:
        return self.n_u * self.N

    @property
    def n_m(self) -> int:
        return self.m_rows.size

    @property
    def n_z(self) -> int:
        return self.z_rows.size

    @property
    def n_eps(self) -> int:
        return self.r * self.N if self.soft else 0

    @property
    def v(self) -> slice:
        return slice(0, self.n_v)

    @property
    def m(self) -> slice:
        return slice(self.v.stop, self.v.stop + self.n_m)

    @property
    def z(self) -> slice:
        return slice(self.m.stop, self.m.stop + self.n_z)

    @property
    def eps_mean(self) -> slice:
        return slice(self.z.stop, self.z.stop + self.n_eps)

    @property
    def eps_var(self) -> slice:
        return slice(self.eps_mean.stop, self.eps_mean.stop + self.n_eps)

    @property
    def g(self) -> slice:
        return slice(self.eps_var.stop, self.eps_var.stop + 1)

    @property
    def n(self) -> int:
        return self.g.stop

    @property
    def n_slack(self) -> int:
        return 2 * self.n_eps

    def blocks(self) -> dict:
        return {
            "v": self.v, "m": self.m, "z": self.z,
            "eps_mean": self.eps_mean, "eps_var": self.eps_var, "g": self.g,
        }

    def eps_index(self, i: int, j: int) -> int:
        """Offset of the slack for prediction step ``i`` (1..N), row ``j``."""
        return (i - 1) * self.r + j

    def M_from(self, x) -> np.ndarray:
        M = np.zeros((self.n_u * self.N, self.n_x * self.N))
        M[self.m_rows, self.m_cols] = np.asarray(x)[self.m]
        return M

    def m_from_M(self, M) -> np.ndarray:
        return np.asarray(M)[self.m_rows, self.m_cols]

    def Z_from(self, x) -> np.ndarray:
        Z = np.zeros((self.a, self.s * self.N))
        Z[self.z_rows, self.z_cols] = np.asarray(x)[self.z]
        return Z

    def v_from(self, x) -> np.ndarray:
        return np.asarray(x)[self.v]

    def slacks_from(self, x) -> np.ndarray:
        x = np.asarray(x)
        return np.concatenate([x[self.eps_mean], x[self.eps_var]])


def feedback_pattern(N: int, n_u: int, n_x: int) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) of the free entries of M in column-major order."""
    rows, cols = [], []
    for k in range(n_x * N):
        tau = k // n_x
        for a in range((tau + 1) * n_u, N * n_u):
            rows.append(a)
            cols.append(k)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def _is_box(W: Polytope) -> bool:
    return bool(np.all(np.count_nonzero(W.H, axis=1) == 1))


def build_layout(
    ops: HorizonOperators,
    W: Polytope,
    feedback: bool = True,
    soft: bool = True,
    reduce_z: bool = True,
) -> DecisionLayout:
    N, n_x, n_u, s, r = ops.N, ops.n_x, ops.n_u, ops.s, ops.r
    a = W.rows
    if W.dim != n_x * N:
        raise ValueError(f"saturated support has dimension {W.dim}, expected {n_x * N}")
    if feedback:
        m_rows, m_cols = feedback_pattern(N, n_u, n_x)
        nz_cols = _hum_structure(ops, m_rows, m_cols)
        z_rows, z_cols = [], []
        for rho in range(s * N):
            if reduce_z and _is_box(W):
                # Box rows touching only structurally zero columns of (H_u M)
                # have zero optimal multipliers; leave them out.
                support = np.flatnonzero(W.H[:, nz_cols[rho]].any(axis=1)) if nz_cols[rho].size else np.array([], int)
            else:
                support = np.arange(a)
            z_rows.extend(support.tolist())
            z_cols.extend([rho] * support.size)
        z_rows = np.array(z_rows, dtype=int)
        z_cols = np.array(z_cols, dtype=int)
        # Column-major order of Z for stable indexing.
        order = np.lexsort((z_rows, z_cols))
        z_rows, z_cols = z_rows[order], z_cols[order]
    else:
        m_rows = m_cols = z_rows = z_cols = np.array([], dtype=int)
    return DecisionLayout(N, n_x, n_u, s, r, a, m_rows, m_cols, z_rows, z_cols, soft)


def _hum_structure(ops, m_rows, m_cols) -> list[np.ndarray]:
    """Structurally nonzero columns of each row of ``H_u M``."""
    mask = np.zeros((ops.n_u * ops.N, ops.n_x * ops.N), dtype=bool)
    mask[m_rows, m_cols] = True
    hu = ops.bigHu != 0
    struct = (hu.astype(int) @ mask.astype(int)) > 0
    return [np.flatnonzero(struct[rho]) for rho in range(struct.shape[0])]


# ---------------------------------------------------------------------------
# problem data


def psd_factor(S: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Return ``F`` with ``F' F = S`` and no all-zero rows (``S`` PSD)."""
    S = np.asarray(S, dtype=float)
    if S.size == 0:
        return np.zeros((0, S.shape[0]))
    S = 0.5 * (S + S.T)
    scale = max(1.0, float(np.max(np.abs(S))))
    try:
        L = np.linalg.cholesky(S)
        if np.min(np.diag(L)) > 1e-8 * np.sqrt(scale):
            return L.T
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(S)
    if vals.min() < -1e-9 * scale:
        raise ValueError(f"matrix is indefinite (min eigenvalue {vals.min():.3e})")
    keep = vals > tol * scale
    return (vecs[:, keep] * np.sqrt(vals[keep])).T


@dataclass(frozen=True)
class SmpcProblemData:
    """x-independent data plus the two x-dependent pieces (``b``, ``mean_shift``)."""

    S1: np.ndarray
    S2: np.ndarray
    nu: np.ndarray
    Lambda_blocks: tuple
    q: np.ndarray
    c: np.ndarray
    state_rows: np.ndarray
    mean_rhs: np.ndarray
    rho: float
    b_map: np.ndarray
    mean_map: np.ndarray

    def b(self, x0) -> np.ndarray:
        return self.b_map @ np.asarray(x0, dtype=float)

    def mean_shift(self, x0) -> np.ndarray:
        return self.mean_map @ np.asarray(x0, dtype=float)


def build_problem_data(
    ops: HorizonOperators,
    moments: SaturationMoments,
    Sigma_w: np.ndarray,
    tightened: list[TightenedStateConstraint],
    weights: WeightSpec,
    layout: DecisionLayout,
) -> SmpcProblemData:
    B, Q, R, D, Gb = ops.bigB, ops.bigQ, ops.bigR, ops.bigD, ops.bigG
    S1 = B.T @ Q @ B + R
    S1 = 0.5 * (S1 + S1.T)
    S2 = 2.0 * Gb.T @ D.T @ Q @ B
    Om1, Om2 = moments.Omega1, moments.Omega2
    # tr(S2 M Om2) = <S2' Om2', M>
    nu_full = S2.T @ Om2.T
    nu = nu_full[layout.m_rows, layout.m_cols]

    # Lambda = Om1 (x) S1 restricted to the pattern is block diagonal by the
    # time index of the M column; each block is Om1_blk (x) S1[R_tau, R_tau].
    blocks = []
    n_x, n_u, N = ops.n_x, ops.n_u, ops.N
    pos = 0
    for tau in range(N):
        rows_tau = np.arange((tau + 1) * n_u, N * n_u)
        size = rows_tau.size * n_x
        if size == 0 or layout.n_m == 0:
            continue
        blocks.append((pos, rows_tau, Om1[tau * n_x:(tau + 1) * n_x, tau * n_x:(tau + 1) * n_x]))
        pos += size

    Sw_big = np.kron(np.eye(N), Sigma_w)
    DG = D @ Gb
    cov_w = DG @ Sw_big @ DG.T
    rows = np.array([t.row for t in tightened]).reshape(len(tightened), -1)
    q = 2.0 * (Om2 @ DG.T @ rows.T).T if len(tightened) else np.zeros((0, n_x * N))
    c = np.array([t.row @ cov_w @ t.row - t.var_cap for t in tightened])
    mean_rhs = np.array([t.mean_rhs for t in tightened])
    b_map = 2.0 * B.T @ Q @ ops.bigA
    mean_map = rows @ ops.bigA if len(tightened) else np.zeros((0, n_x))
    return SmpcProblemData(
        S1=S1, S2=S2, nu=nu, Lambda_blocks=tuple(blocks), q=q, c=c,
        state_rows=rows, mean_rhs=mean_rhs, rho=weights.rho,
        b_map=b_map, mean_map=mean_map,
    )


def lambda_dense(data: SmpcProblemData, layout: DecisionLayout) -> np.ndarray:
    """Dense ``Omega1 (x) S1`` restricted to the M pattern (small problems)."""
    nm = layout.n_m
    L = np.zeros((nm, nm))
    for pos, rows_tau, om in data.Lambda_blocks:
        S = data.S1[np.ix_(rows_tau, rows_tau)]
        size = rows_tau.size * om.shape[0]
        L[pos:pos + size, pos:pos + size] = np.kron(om, S)
    return L


# ---------------------------------------------------------------------------
# rows


@dataclass
class RowBlock:
    """Rows ``G x (op) h`` over the full decision vector; ``kind`` is eq, lin or soc."""

    kind: str
    G: sp.csr_matrix
    h: np.ndarray
    label: str


def quad_to_soc(Qm=None, b=None, c: float = 0.0, factor=None, label: str = "quad") -> RowBlock:
    """Cone rows equivalent to ``x'Qx + b'x + c <= 0``.

    Emits ``||[(1 + b'x + c)/2; F x]|| <= (1 - b'x - c)/2`` with ``F'F = Q``.
    A zero quadratic part degenerates to the linear row ``b'x <= -c``.
    """
    b = np.asarray(b, dtype=float).ravel()
    n = b.size
    if factor is None:
        Qm = np.atleast_2d(np.asarray(Qm, dtype=float))
        if Qm.shape != (n, n):
            raise ValueError("quadratic and linear parts have inconsistent sizes")
        F = sp.csr_matrix(psd_factor(Qm))
    else:
        F = sp.csr_matrix(factor)
        if F.shape[1] != n:
            raise ValueError("factor has the wrong number of columns")
    F.eliminate_zeros()
    nz_rows = np.flatnonzero(np.diff(F.indptr))
    F = F[nz_rows]
    brow = sp.csr_matrix(b.reshape(1, -1))
    if F.shape[0] == 0:
        return RowBlock("lin", brow, np.array([-c]), label)
    G = sp.vstack([0.5 * brow, -0.5 * brow, -F], format="csr")
    h = np.concatenate([[0.5 * (1.0 - c), 0.5 * (1.0 + c)], np.zeros(F.shape[0])])
    return RowBlock("soc", G, h, label)


def _embed(cols_map: slice | np.ndarray, mat, n: int) -> sp.csr_matrix:
    """Place ``mat`` (rows x k) into columns ``cols_map`` of an n-column matrix."""
    mat = sp.coo_matrix(mat)
    cols = np.arange(n)[cols_map] if isinstance(cols_map, slice) else np.asarray(cols_map)
    return sp.csr_matrix((mat.data, (mat.row, cols[mat.col])), shape=(mat.shape[0], n))


def build_input_duality_rows(
    layout: DecisionLayout, bigHu: np.ndarray, bigku: np.ndarray, W: Polytope
) -> list[RowBlock]:
    """Hard input bounds through LP duality over the saturated support.

    ``H_u v + Z' k_w <= k_u``, ``Z' H_w = H_u M``, ``Z >= 0``.
    """
    n = layout.n
    sN = bigHu.shape[0]
    if bigku.size != sN or bigHu.shape[1] != layout.n_v:
        raise ValueError("input constraint operators do not match the layout")
    if W.dim != layout.n_x * layout.N or W.rows != layout.a:
        raise ValueError("saturated support does not match the layout")
    out = []
    # H_u v + Z' k_w <= k_u
    hv = _embed(layout.v, bigHu, n)
    if layout.n_z:
        zk = sp.csr_matrix(
            (W.k[layout.z_rows], (layout.z_cols, np.arange(layout.z.start, layout.z.stop))),
            shape=(sN, n),
        )
        hv = hv + zk
    out.append(RowBlock("lin", hv.tocsr(), np.array(bigku, dtype=float), "input_bound"))
    if layout.n_z == 0:
        return out
    # Z' H_w - H_u M = 0, one row per (rho, k) that is not structurally empty.
    ncols = layout.n_x * layout.N
    ri, ci, vals = [], [], []
    zidx = np.arange(layout.z.start, layout.z.stop)
    Hw_csr = sp.csr_matrix(W.H)
    for t, (l, rho) in enumerate(zip(layout.z_rows, layout.z_cols)):
        start, stop = Hw_csr.indptr[l], Hw_csr.indptr[l + 1]
        for k, val in zip(Hw_csr.indices[start:stop], Hw_csr.data[start:stop]):
            ri.append(rho * ncols + k)
            ci.append(zidx[t])
            vals.append(val)
    midx = np.arange(layout.m.start, layout.m.stop)
    Hu = np.asarray(bigHu)
    for t, (arow, k) in enumerate(zip(layout.m_rows, layout.m_cols)):
        for rho in np.flatnonzero(Hu[:, arow]):
            ri.append(rho * ncols + k)
            ci.append(midx[t])
            vals.append(-Hu[rho, arow])
    E = sp.csr_matrix((vals, (ri, ci)), shape=(sN * ncols, n))
    E.sum_duplicates()
    E.eliminate_zeros()
    keep = np.flatnonzero(np.diff(E.indptr))
    out.append(RowBlock("eq", E[keep], np.zeros(keep.size), "input_duality"))
    if layout.n_z:
        out.append(RowBlock("lin", _embed(layout.z, -sp.identity(layout.n_z), n), np.zeros(layout.n_z), "z_nonneg"))
    return out


def _variance_factor(layout: DecisionLayout, beta: np.ndarray, om_sqrt: np.ndarray):
    """Sparse ``T`` (y = T m) and ``F = Om1^{1/2} T`` for ``y' = beta' M``."""
    n_x = layout.n_x
    T = sp.csr_matrix(
        (beta[layout.m_rows], (layout.m_cols, np.arange(layout.n_m))),
        shape=(n_x * layout.N, layout.n_m),
    )
    T.eliminate_zeros()
    F = (om_sqrt @ T).tocsr()
    return T, F


def build_state_rows(
    layout: DecisionLayout,
    data: SmpcProblemData,
    ops: HorizonOperators,
    moments: SaturationMoments,
    variance_rows: bool = True,
    x0=None,
) -> list[RowBlock]:
    """Softened mean rows, variance cones and slack sign rows."""
    n = layout.n
    out = []
    R = data.state_rows.shape[0]
    if R == 0:
        return out
    x0 = np.zeros(ops.n_x) if x0 is None else np.asarray(x0, dtype=float)
    hB = data.state_rows @ ops.bigB
    mean = _embed(layout.v, hB, n)
    if layout.soft:
        mean = mean - _embed(layout.eps_mean, sp.identity(R), n)
    out.append(RowBlock("lin", mean.tocsr(), data.mean_rhs - data.mean_shift(x0), "state_mean"))

    if variance_rows:
        om_blk = psd_factor(moments.block1) if moments.block1.size else np.zeros((0, 0))
        om_sqrt = sp.block_diag([sp.csr_matrix(om_blk)] * ops.N, format="csr") if om_blk.size else None
        for idx in range(R):
            beta = ops.bigB.T @ data.state_rows[idx]
            lin = np.zeros(n)
            if layout.soft:
                lin[layout.eps_var.start + idx] = -1.0
            if layout.n_m and om_sqrt is not None:
                T, F = _variance_factor(layout, beta, om_sqrt)
                lin[layout.m] += T.T @ data.q[idx]
                Ffull = _embed(layout.m, F, n)
            else:
                Ffull = sp.csr_matrix((0, n))
            blk = quad_to_soc(b=lin, c=float(data.c[idx]), factor=Ffull, label=f"state_var[{idx}]")
            out.append(blk)
    if layout.soft:
        out.append(RowBlock("lin", _embed(layout.eps_mean, -sp.identity(R), n), np.zeros(R), "eps_mean_nonneg"))
        out.append(RowBlock("lin", _embed(layout.eps_var, -sp.identity(R), n), np.zeros(R), "eps_var_nonneg"))
    return out


def objective_cone(layout: DecisionLayout, data: SmpcProblemData) -> RowBlock:
    """``v'S1 v + m' Lambda m <= g`` as a cone over the whole decision vector."""
    n = layout.n
    parts = [_embed(layout.v, psd_factor(data.S1), n)]
    m0 = layout.m.start
    for pos, rows_tau, om in data.Lambda_blocks:
        fo = psd_factor(om)
        fs = psd_factor(data.S1[np.ix_(rows_tau, rows_tau)])
        blk = sp.kron(sp.csr_matrix(fo), sp.csr_matrix(fs), format="csr")
        size = rows_tau.size * om.shape[0]
        parts.append(_embed(np.arange(m0 + pos, m0 + pos + size), blk, n))
    F = sp.vstack(parts, format="csr")
    lin = np.zeros(n)
    lin[layout.g] = -1.0
    return quad_to_soc(b=lin, c=0.0, factor=F, label="objective")


# ---------------------------------------------------------------------------
# assembly


class SocpBuilder:
    """Caches everything that does not depend on the measured state.

    ``program(x)`` only rewrites the linear objective and the right-hand
    sides of the mean rows.
    """

    def __init__(
        self,
        ops: HorizonOperators,
        moments: SaturationMoments,
        Sigma_w: np.ndarray,
        tightened: list[TightenedStateConstraint],
        weights: WeightSpec,
        W: Polytope,
        feedback: bool = True,
        soft: bool = True,
        variance_rows: bool = True,
        reduce_z: bool = True,
    ):
        self.ops = ops
        self.moments = moments
        self.weights = weights
        self.W = W
        self.variance_rows = variance_rows
        self.layout = build_layout(ops, W, feedback=feedback, soft=soft, reduce_z=reduce_z)
        self.data = build_problem_data(ops, moments, Sigma_w, tightened, weights, self.layout)
        self.Sigma_w = np.asarray(Sigma_w, dtype=float)
        self._build_static()

    def _build_static(self):
        lay, data = self.layout, self.data
        blocks = build_input_duality_rows(lay, self.ops.bigHu, self.ops.bigku, self.W)
        state = build_state_rows(lay, data, self.ops, self.moments, self.variance_rows)
        blocks += state
        blocks.append(objective_cone(lay, data))

        eqs = [b for b in blocks if b.kind == "eq"]
        lins = [b for b in blocks if b.kind == "lin"]
        socs = [b for b in blocks if b.kind == "soc"]
        n = lay.n
        self.A = sp.vstack([b.G for b in eqs], format="csc") if eqs else sp.csc_matrix((0, n))
        self.b = np.concatenate([b.h for b in eqs]) if eqs else np.zeros(0)
        ordered = lins + socs
        self.G = sp.vstack([b.G for b in ordered], format="csc")
        self.h0 = np.concatenate([b.h for b in ordered])
        self.dims = ConeDims(sum(b.G.shape[0] for b in lins), tuple(b.G.shape[0] for b in socs))
        self.eq_labels, self.cone_labels = [], []
        pos = 0
        for b in eqs:
            self.eq_labels.append((b.label, pos, pos + b.G.shape[0]))
            pos += b.G.shape[0]
        pos = 0
        for b in ordered:
            self.cone_labels.append((b.label, pos, pos + b.G.shape[0]))
            if b.label == "state_mean":
                self._mean_rows = slice(pos, pos + b.G.shape[0])
            pos += b.G.shape[0]
        if not hasattr(self, "_mean_rows"):
            self._mean_rows = slice(0, 0)
        self.c0 = np.zeros(n)
        self.c0[lay.m] = data.nu
        self.c0[lay.eps_mean] = data.rho
        self.c0[lay.eps_var] = data.rho
        self.c0[lay.g] = 1.0

    def program(self, x0) -> ConicProgram:
        x0 = np.asarray(x0, dtype=float)
        c = self.c0.copy()
        c[self.layout.v] = self.data.b(x0)
        h = self.h0.copy()
        h[self._mean_rows] = self.data.mean_rhs - self.data.mean_shift(x0)
        return ConicProgram(
            c=c, A=self.A, b=self.b, G=self.G, h=h, dims=self.dims,
            var_blocks=self.layout.blocks(), eq_labels=list(self.eq_labels),
            cone_labels=list(self.cone_labels),
        )

    def feasible_point(self, x0) -> np.ndarray:
        """``(M, v, Z, eps) = (0, 0, 0, eps~)`` with ``g = 0``."""
        lay, data = self.layout, self.data
        x = np.zeros(lay.n)
        if lay.soft and data.state_rows.shape[0]:
            x[lay.eps_mean] = np.maximum(0.0, data.mean_shift(x0) - data.mean_rhs)
            if self.variance_rows:
                x[lay.eps_var] = np.maximum(0.0, data.c)
        return x

    def objective_terms(self, x, x0) -> dict:
        """Objective pieces evaluated directly from (M, v, eps) for cross-checks."""
        lay, data = self.layout, self.data
        v = x[lay.v]
        m = x[lay.m]
        quad_m = 0.0
        for pos, rows_tau, om in data.Lambda_blocks:
            size = rows_tau.size * om.shape[0]
            mm = m[pos:pos + size].reshape(om.shape[0], rows_tau.size)
            S = data.S1[np.ix_(rows_tau, rows_tau)]
            quad_m += float(np.einsum("ka,ab,lb,kl->", mm, S, mm, om))
        eps = lay.slacks_from(x)
        return {
            "linear_v": float(data.b(x0) @ v),
            "quad_v": float(v @ data.S1 @ v),
            "linear_m": float(data.nu @ m),
            "quad_m": quad_m,
            "penalty": float(data.rho * eps.sum()),
            "total": float(data.b(x0) @ v + v @ data.S1 @ v + data.nu @ m + quad_m + data.rho * eps.sum()),
        }


def assemble(
    x0,
    ops: HorizonOperators,
    moments: SaturationMoments,
    Sigma_w: np.ndarray,
    tightened: list[TightenedStateConstraint],
    weights: WeightSpec,
    W: Polytope,
    **options,
) -> ConicProgram:
    return SocpBuilder(ops, moments, Sigma_w, tightened, weights, W, **options).program(x0)


# ---------------------------------------------------------------------------
# cost of a fixed policy


def constant_cost(x0, ops: HorizonOperators, Sigma_w: np.ndarray) -> float:
    """``c(x) = ||x||^2_{A'QA} + E ||w||^2_{G'D'QDG}``."""
    x0 = np.asarray(x0, dtype=float)
    DG = ops.bigD @ ops.bigG
    Sw = np.kron(np.eye(ops.N), Sigma_w)
    return float(x0 @ ops.bigA.T @ ops.bigQ @ ops.bigA @ x0 + np.trace(DG.T @ ops.bigQ @ DG @ Sw))


@dataclass(frozen=True)
class CostEstimate:
    closed_form: float
    constant: float
    monte_carlo: float
    std_error: float
    samples: int

    @property
    def closed_form_total(self) -> float:
        return self.closed_form + self.constant

    @property
    def z_score(self) -> float:
        if self.std_error == 0.0:
            return 0.0 if self.monte_carlo == self.closed_form_total else np.inf
        return (self.monte_carlo - self.closed_form_total) / self.std_error


def closed_form_cost(x0, M, v, ops: HorizonOperators, moments: SaturationMoments) -> float:
    """``b'v + ||v||^2_S1 + tr(M' S1 M Om1 + S2 M Om2)`` (``c(x)`` excluded)."""
    x0 = np.asarray(x0, dtype=float)
    B, Q, R = ops.bigB, ops.bigQ, ops.bigR
    S1 = B.T @ Q @ B + R
    S2 = 2.0 * ops.bigG.T @ ops.bigD.T @ Q @ B
    b = 2.0 * B.T @ Q @ ops.bigA @ x0
    return float(
        b @ v + v @ S1 @ v
        + np.trace(M.T @ S1 @ M @ moments.Omega1)
        + np.trace(S2 @ M @ moments.Omega2)
    )


def cost_estimate(
    x0, M, v, ops: HorizonOperators, moments: SaturationMoments, weights: WeightSpec,
    sys, policy, samples: int = 100_000, rng: np.random.Generator | None = None,
    batch: int = 20_000,
) -> CostEstimate:
    """Closed-form cost of a fixed saturated policy and a Monte Carlo check."""
    rng = np.random.default_rng(0) if rng is None else rng
    x0 = np.asarray(x0, dtype=float)
    M = np.asarray(M, dtype=float)
    v = np.asarray(v, dtype=float)
    closed = closed_form_cost(x0, M, v, ops, moments)
    const = constant_cost(x0, ops, sys.Sigma_w)
    N, n_w = ops.N, ops.n_w
    total = 0.0
    total_sq = 0.0
    done = 0
    base = ops.bigA @ x0
    DG = ops.bigD @ ops.bigG
    while done < samples:
        k = min(batch, samples - done)
        w = sys.disturbance.sample(rng, k * N).reshape(k, N * n_w)
        gw = w @ ops.bigG.T
        u = policy(gw) @ M.T + v
        xs = base + u @ ops.bigB.T + w @ DG.T
        cost = np.einsum("si,ij,sj->s", xs, ops.bigQ, xs) + np.einsum("si,ij,sj->s", u, ops.bigR, u)
        total += cost.sum()
        total_sq += (cost * cost).sum()
        done += k
    mean = total / samples
    var = max(total_sq / samples - mean * mean, 0.0)
    return CostEstimate(closed, const, float(mean), float(np.sqrt(var / samples)), samples)


# ---------------------------------------------------------------------------
# plain-text interchange
#
#   SMPC-CONIC 1
#   size <n> <p> <m>            variables, equality rows, cone rows
#   cones <l> <q1> <q2> ...     orthant rows, then SOC sizes
#   offset <float>
#   var <name> <start> <stop>   (repeated)
#   eqlabel <name> <start> <stop>
#   conelabel <name> <start> <stop>
#   c <n>      followed by n values, one per line
#   b <p>      ...
#   h <m>      ...
#   A <nnz>    followed by "row col value" triplets
#   G <nnz>    ...
#   end
#
# Floats are written with repr() so a round trip is bit-exact.

CONIC_MAGIC = "SMPC-CONIC 1"


def write_conic(prog: ConicProgram, path_or_file) -> None:
    lines = [CONIC_MAGIC]
    m = prog.h.size
    lines.append(f"size {prog.n} {prog.b.size} {m}")
    lines.append("cones " + " ".join(str(v) for v in (prog.dims.l, *prog.dims.q)))
    lines.append(f"offset {prog.offset!r}")
    for name, sl in prog.var_blocks.items():
        lines.append(f"var {name} {sl.start} {sl.stop}")
    for name, lo, hi in prog.eq_labels:
        lines.append(f"eqlabel {_token(name)} {lo} {hi}")
    for name, lo, hi in prog.cone_labels:
        lines.append(f"conelabel {_token(name)} {lo} {hi}")
    for tag, vec in (("c", prog.c), ("b", prog.b), ("h", prog.h)):
        lines.append(f"{tag} {vec.size}")
        lines.extend(repr(float(v)) for v in vec)
    for tag, mat in (("A", prog.A), ("G", prog.G)):
        coo = sp.coo_matrix(mat)
        order = np.lexsort((coo.col, coo.row))
        lines.append(f"{tag} {coo.nnz}")
        lines.extend(f"{coo.row[k]} {coo.col[k]} {float(coo.data[k])!r}" for k in order)
    lines.append("end")
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        with open(path_or_file, "w") as fh:
            fh.write(text)


def _token(name: str) -> str:
    return str(name).replace(" ", "_")


def read_conic(path_or_file) -> ConicProgram:
    if hasattr(path_or_file, "read"):
        text = path_or_file.read()
        src = getattr(path_or_file, "name", "<stream>")
    else:
        with open(path_or_file) as fh:
            text = fh.read()
        src = str(path_or_file)
    lines = text.splitlines()
    pos = 0

    def fail(msg):
        raise ValueError(f"{src}:{pos}: {msg}")

    def next_line():
        nonlocal pos
        while pos < len(lines):
            pos += 1
            raw = lines[pos - 1].strip()
            if raw and not raw.startswith("#"):
                return raw
        fail("unexpected end of file")

    if next_line() != CONIC_MAGIC:
        fail(f"missing header {CONIC_MAGIC!r}")
    n = p = m = None
    dims = None
    offset = 0.0
    var_blocks, eq_labels, cone_labels = {}, [], []
    vecs, mats = {}, {}
    while True:
        parts = next_line().split()
        key = parts[0]
        try:
            if key == "end":
                break
            if key == "size":
                n, p, m = (int(v) for v in parts[1:4])
            elif key == "cones":
                vals = [int(v) for v in parts[1:]]
                dims = ConeDims(vals[0], tuple(vals[1:]))
            elif key == "offset":
                offset = float(parts[1])
            elif key == "var":
                var_blocks[parts[1]] = slice(int(parts[2]), int(parts[3]))
            elif key in ("eqlabel", "conelabel"):
                (eq_labels if key == "eqlabel" else cone_labels).append((parts[1], int(parts[2]), int(parts[3])))
            elif key in ("c", "b", "h"):
                cnt = int(parts[1])
                vecs[key] = np.array([float(next_line()) for _ in range(cnt)])
            elif key in ("A", "G"):
                cnt = int(parts[1])
                trip = np.array([next_line().split() for _ in range(cnt)], dtype=float).reshape(cnt, 3)
                mats[key] = trip
            else:
                fail(f"unknown record {key!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ValueError) and str(exc).startswith(src):
                raise
            fail(f"malformed {key!r} record: {exc}")
    if n is None or dims is None:
        fail("missing size or cones record")
    for key in ("c", "b", "h", "A", "G"):
        if key not in vecs and key not in mats:
            fail(f"missing {key!r} block")

    def build(trip, rows):
        return sp.csc_matrix((trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))), shape=(rows, n))

    prog = ConicProgram(
        c=vecs["c"], A=build(mats["A"], p), b=vecs["b"], G=build(mats["G"], m), h=vecs["h"], dims=dims,
        var_blocks=var_blocks, eq_labels=eq_labels, cone_labels=cone_labels, offset=offset,
    )
    prog.validate()
    return prog
