"""Adapter to the Clarabel interior-point solver.

Used for the long Monte Carlo ensembles where the reference solver is too
slow.  Equality rows map to Clarabel's zero cone and the remaining rows keep
their order.  One exact transform is applied: a cone labelled
``objective`` of the form ``||F x||^2 <= g``, with ``g`` appearing nowhere
else, is replaced by the quadratic objective ``x'F'F x`` (Clarabel handles
quadratic objectives natively and converges in far fewer iterations).  The
epigraph variable, the cone slack and its multiplier are recovered in closed
form, so the returned solution refers to the original program.
"""

from __future__ import annotations

import time

import clarabel
import numpy as np
import scipy.sparse as sp

from ..socp import ConicProgram
from .result import ConicSolution, SolverSettings

_STATUS = {
    "Solved": "optimal",
    "AlmostSolved": "max-iterations",
    "MaxIterations": "max-iterations",
    "MaxTime": "max-iterations",
    "PrimalInfeasible": "primal-infeasible",
    "DualInfeasible": "dual-infeasible",
    "AlmostPrimalInfeasible": "primal-infeasible",
    "AlmostDualInfeasible": "dual-infeasible",
}


def _settings(s: SolverSettings):
    cs = clarabel.DefaultSettings()
    cs.verbose = False
    cs.max_iter = s.max_iter
    cs.tol_feas = s.tol
    cs.tol_gap_abs = s.tol
    cs.tol_gap_rel = s.tol
    cs.equilibrate_enable = s.scaling
    cs.equilibrate_max_iter = max(s.ruiz_sweeps, 1)
    cs.max_threads = 1
    cs.presolve_enable = False
    return cs


class ClarabelSession:
    """Keeps one Clarabel workspace alive across solves with equal structure.

    Only ``c`` and ``h`` may change between calls (the state enters nowhere
    else), which Clarabel supports through its data-update interface.
    """

    def __init__(self, prog: ConicProgram, settings: SolverSettings):
        self.settings = settings
        self.n = prog.n
        self.p = prog.A.shape[0]
        self.dims = prog.dims
        self._structure = (prog.A.shape, prog.G.shape, prog.dims)
        self.lift = _find_epigraph(prog)
        G = prog.G.tocsr()
        q_dims = list(prog.dims.q)
        if self.lift is None:
            self.keep = np.arange(self.n)
            self.rows = np.arange(G.shape[0])
            self.P = sp.csc_matrix((self.n, self.n))
        else:
            g, lo, hi, k = self.lift
            self.keep = np.setdiff1d(np.arange(self.n), [g])
            self.rows = np.concatenate([np.arange(lo), np.arange(hi, G.shape[0])])
            F = -G[lo + 2:hi][:, self.keep]
            self.F = F.tocsr()
            self.P = sp.triu(2.0 * (F.T @ F), format="csc")
            del q_dims[k]
        A = prog.A.tocsc()[:, self.keep]
        self.Amat = sp.vstack([A, G[self.rows][:, self.keep]], format="csc")
        cones = []
        if self.p:
            cones.append(clarabel.ZeroConeT(self.p))
        if prog.dims.l:
            cones.append(clarabel.NonnegativeConeT(prog.dims.l))
        cones += [clarabel.SecondOrderConeT(q) for q in q_dims]
        self.cones = cones
        self._solver = None

    def solve(self, prog: ConicProgram) -> ConicSolution:
        if (prog.A.shape, prog.G.shape, prog.dims) != self._structure:
            raise ValueError("program structure differs from the cached session")
        t0 = time.perf_counter()
        if self.lift is not None and prog.c[self.lift[0]] != 1.0:
            raise ValueError("epigraph variable must carry unit cost")
        q = np.asarray(prog.c, dtype=float)[self.keep]
        bvec = np.concatenate([prog.b, prog.h[self.rows]])
        if self._solver is None:
            self._solver = clarabel.DefaultSolver(self.P, q, self.Amat, bvec, self.cones, _settings(self.settings))
        else:
            self._solver.update(q=q, b=bvec)
        sol = self._solver.solve()
        status = _STATUS.get(str(sol.status).split(".")[-1], "numerical-failure")
        x = np.zeros(self.n)
        x[self.keep] = np.asarray(sol.x, dtype=float)
        z_all = np.asarray(sol.z, dtype=float)
        s_all = np.asarray(sol.s, dtype=float)
        y = z_all[: self.p]
        z = np.zeros(prog.G.shape[0])
        s = np.zeros(prog.G.shape[0])
        z[self.rows] = z_all[self.p:]
        s[self.rows] = s_all[self.p:]
        if self.lift is not None:
            g, lo, hi, _ = self.lift
            fx = self.F @ x[self.keep]
            x[g] = float(fx @ fx)
            s[lo:hi] = prog.h[lo:hi] - prog.G[lo:hi] @ x
            # unit cost on g fixes the multiplier: z = 2 (s0, -s1, -s_y)
            z[lo] = 2.0 * s[lo]
            z[lo + 1:hi] = -2.0 * s[lo + 1:hi]
        pres = max(
            np.linalg.norm(prog.A @ x - prog.b, np.inf) if self.p else 0.0,
            np.linalg.norm(prog.G @ x + s - prog.h, np.inf),
        ) / max(1.0, np.linalg.norm(prog.b, np.inf) if self.p else 0.0, np.linalg.norm(prog.h, np.inf))
        dres = np.linalg.norm(prog.A.T @ y + prog.G.T @ z + prog.c, np.inf) / max(1.0, np.linalg.norm(prog.c, np.inf))
        pcost = float(prog.c @ x)
        dcost = float(-(prog.b @ y) - prog.h @ z)
        gap = abs(pcost - dcost) / max(1.0, min(abs(pcost), abs(dcost)))
        return ConicSolution(
            x=x, y=y, z=z, s=s, status=status, primal_residual=float(pres), dual_residual=float(dres),
            gap=float(gap), iterations=int(sol.iterations), solve_time=time.perf_counter() - t0,
            objective=pcost + prog.offset, dual_objective=dcost + prog.offset, solver="clarabel",
            var_blocks=dict(prog.var_blocks), diagnostics={"clarabel_status": str(sol.status)},
        )


def _find_epigraph(prog: ConicProgram):
    """Locate an ``objective`` cone ``||F x||^2 <= g`` eligible for lifting.

    Returns ``(g, first_row, end_row, cone_index)`` or ``None``.
    """
    labels = [lab for lab in prog.cone_labels if lab[0] == "objective"]
    if len(labels) != 1:
        return None
    _, lo, hi = labels[0]
    starts = np.cumsum([prog.dims.l] + list(prog.dims.q))
    hits = np.flatnonzero(starts[:-1] == lo)
    if hits.size != 1 or starts[hits[0] + 1] != hi:
        return None
    G = prog.G.tocsr()
    head = G[lo:lo + 2].toarray()
    cols = np.flatnonzero(np.any(head != 0.0, axis=0))
    if cols.size != 1:
        return None
    g = int(cols[0])
    if not np.allclose(head[:, g], [-0.5, 0.5]) or not np.allclose(prog.h[lo:lo + 2], [0.5, 0.5]):
        return None
    colg = prog.G.tocsc()[:, g]
    if colg.nnz != 2 or (prog.A.shape[0] and prog.A.tocsc()[:, g].nnz):
        return None
    if G[lo + 2:hi][:, g].nnz:
        return None
    return g, int(lo), int(hi), int(hits[0])


def solve_clarabel(prog: ConicProgram, settings: SolverSettings) -> ConicSolution:
    return ClarabelSession(prog, settings).solve(prog)
