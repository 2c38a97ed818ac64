"""Homogeneous self-dual interior-point method for linear + second-order cones.

Solves ``min c'x  s.t.  A x = b,  G x + s = h,  s in K`` with ``K`` a
nonnegative orthant followed by second-order cones.  Nesterov-Todd scaling,
Mehrotra predictor-corrector, sparse LU on an expanded KKT system in which
each second-order cone contributes one extra row so that the scaling block
stays sparse.
"""

from __future__ import annotations

import time
import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..socp import ConeDims, ConicProgram
from .result import ConicSolution, SolverSettings


# ---------------------------------------------------------------------------
# cone algebra


class _Cones:
    """Index bookkeeping and Jordan-algebra operations for ``K``."""

    def __init__(self, dims: ConeDims):
        self.l = dims.l
        self.q = list(dims.q)
        self.m = dims.m
        self.starts = []
        pos = self.l
        for qk in self.q:
            self.starts.append(pos)
            pos += qk
        self.degree = self.l + len(self.q)

    def blocks(self):
        for st, qk in zip(self.starts, self.q):
            yield slice(st, st + qk)

    def identity(self) -> np.ndarray:
        e = np.zeros(self.m)
        e[: self.l] = 1.0
        for st in self.starts:
            e[st] = 1.0
        return e

    def min_eig(self, u) -> float:
        vals = [np.min(u[: self.l])] if self.l else []
        for blk in self.blocks():
            vals.append(u[blk][0] - np.linalg.norm(u[blk][1:]))
        return float(min(vals)) if vals else 1.0

    def inner(self, u, v) -> float:
        return float(u @ v)

    def prod(self, u, v) -> np.ndarray:
        out = np.empty(self.m)
        out[: self.l] = u[: self.l] * v[: self.l]
        for blk in self.blocks():
            ub, vb = u[blk], v[blk]
            out[blk.start] = ub @ vb
            out[blk.start + 1: blk.stop] = ub[0] * vb[1:] + vb[0] * ub[1:]
        return out

    def div(self, lam, d) -> np.ndarray:
        """Solve ``lam o r = d`` for ``r``."""
        out = np.empty(self.m)
        out[: self.l] = d[: self.l] / lam[: self.l]
        for blk in self.blocks():
            lb, db = lam[blk], d[blk]
            det = lb[0] ** 2 - lb[1:] @ lb[1:]
            r0 = (lb[0] * db[0] - lb[1:] @ db[1:]) / det
            out[blk.start] = r0
            out[blk.start + 1: blk.stop] = (db[1:] - r0 * lb[1:]) / lb[0]
        return out

    def max_step(self, u, du) -> float:
        """Largest ``a`` with ``u + a du`` in the cone (``u`` interior)."""
        amax = np.inf
        if self.l:
            neg = du[: self.l] < 0
            if np.any(neg):
                amax = min(amax, float(np.min(-u[: self.l][neg] / du[: self.l][neg])))
        for blk in self.blocks():
            amax = min(amax, _soc_step(u[blk], du[blk]))
        return amax


def _soc_step(u, d) -> float:
    # (u0 + a d0)^2 - ||u1 + a d1||^2 >= 0 and u0 + a d0 >= 0
    qa = d[0] ** 2 - d[1:] @ d[1:]
    qb = 2.0 * (u[0] * d[0] - u[1:] @ d[1:])
    qc = u[0] ** 2 - u[1:] @ u[1:]
    roots = []
    if d[0] < 0:
        roots.append(-u[0] / d[0])
    if abs(qa) > 1e-300:
        disc = qb * qb - 4.0 * qa * qc
        if disc >= 0.0:
            sq = np.sqrt(disc)
            q = -0.5 * (qb + np.copysign(sq, qb))
            for r in (q / qa, qc / q if q != 0 else np.inf):
                if r > 0:
                    roots.append(r)
    elif qb < 0:
        roots.append(-qc / qb)
    return min(roots) if roots else np.inf


class _Scaling:
    """Nesterov-Todd scaling ``W`` with ``W z = W^{-T} s = lambda``."""

    def __init__(self, cones: _Cones, s, z):
        self.cones = cones
        l = cones.l
        self.d = np.sqrt(s[:l] / z[:l])
        self.eta, self.w = [], []
        for blk in cones.blocks():
            sb, zb = s[blk], z[blk]
            sn = np.sqrt(max(sb[0] ** 2 - sb[1:] @ sb[1:], 1e-300))
            zn = np.sqrt(max(zb[0] ** 2 - zb[1:] @ zb[1:], 1e-300))
            sbar, zbar = sb / sn, zb / zn
            gamma = np.sqrt(max((1.0 + sbar @ zbar) / 2.0, 1e-300))
            w = sbar.copy()
            w[0] += zbar[0]
            w[1:] -= zbar[1:]
            w /= 2.0 * gamma
            self.w.append(w)
            self.eta.append(np.sqrt(sn / zn))

    @staticmethod
    def _wbar(w, v, inverse=False):
        # Wbar v, or Wbar^{-1} v = J Wbar J v
        if inverse:
            v = v.copy()
            v[1:] = -v[1:]
        w0, w1 = w[0], w[1:]
        t = w1 @ v[1:]
        out = np.empty_like(v)
        out[0] = w0 * v[0] + t
        out[1:] = v[1:] + (v[0] + t / (1.0 + w0)) * w1
        if inverse:
            out[1:] = -out[1:]
        return out

    def apply(self, v) -> np.ndarray:
        """``W v``."""
        out = np.empty_like(v)
        l = self.cones.l
        out[:l] = v[:l] * self.d
        for blk, w, eta in zip(self.cones.blocks(), self.w, self.eta):
            out[blk] = eta * self._wbar(w, v[blk])
        return out

    def apply_inv(self, v) -> np.ndarray:
        """``W^{-1} v``."""
        out = np.empty_like(v)
        l = self.cones.l
        out[:l] = v[:l] / self.d
        for blk, w, eta in zip(self.cones.blocks(), self.w, self.eta):
            out[blk] = self._wbar(w, v[blk], inverse=True) / eta
        return out


# ---------------------------------------------------------------------------
# KKT system


class _KKT:
    """Expanded sparse KKT system.

    Unknowns ``(dx, dy, dz, t)``; for each second-order cone the block
    ``-W^2 = -eta^2 (2 w w' - J)`` is represented through one auxiliary ``t``.
    """

    def __init__(self, A, G, cones: _Cones, reg: float = 1e-10):
        self.A = A.tocsc()
        self.G = G.tocsc()
        self.cones = cones
        self.n = G.shape[1]
        self.p = A.shape[0]
        self.reg = reg
        self.pivot_thresh = 1.0
        self.nq = len(cones.q)
        self.size = self.n + self.p + cones.m + self.nq
        top = sp.bmat(
            [[None, self.A.T, self.G.T], [self.A, None, None], [self.G, None, None]],
            format="coo",
        )
        self._base = (top.row, top.col, top.data)
        self.min_pivot = np.nan

    def factor(self, scaling: _Scaling):
        n, p, cones = self.n, self.p, self.cones
        off = n + p
        rows, cols, vals = [list(a) for a in self._base]
        l = cones.l
        idx = off + np.arange(l)
        rows += idx.tolist()
        cols += idx.tolist()
        vals += (-(scaling.d ** 2)).tolist()
        for k, (blk, w, eta) in enumerate(zip(cones.blocks(), scaling.w, scaling.eta)):
            # -W^2 = eta^2 J - 2 eta^2 w w'; the rank-one part goes through t.
            ii = off + np.arange(blk.start, blk.stop)
            diag = np.full(ii.size, -eta * eta)
            diag[0] = eta * eta
            rows += ii.tolist()
            cols += ii.tolist()
            vals += diag.tolist()
            t = n + p + cones.m + k
            coef = -np.sqrt(2.0) * eta * w
            rows += ii.tolist() + [t] * ii.size + [t]
            cols += [t] * ii.size + ii.tolist() + [t]
            vals += coef.tolist() + coef.tolist() + [1.0]
        K = sp.csc_matrix((vals, (rows, cols)), shape=(self.size, self.size))
        self.K = K
        reg = np.concatenate([
            np.full(n, self.reg), np.full(p, -self.reg), np.full(cones.m, -self.reg), np.zeros(self.nq)
        ])
        Kr = (K + sp.diags(reg)).tocsc()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            self.lu = spla.splu(Kr, permc_spec="COLAMD", diag_pivot_thresh=self.pivot_thresh)
        u = self.lu.U.diagonal()
        self.min_pivot = float(np.min(np.abs(u))) if u.size else np.nan

    def solve(self, rx, ry, rz, refine: int = 10):
        rhs = np.concatenate([rx, ry, rz, np.zeros(self.nq)])
        sol = self.lu.solve(rhs)
        res = rhs - self.K @ sol
        err = np.linalg.norm(res, np.inf)
        target = 1e-15 * max(1.0, np.linalg.norm(rhs, np.inf))
        for _ in range(refine):
            if err <= target:
                break
            cand = sol + self.lu.solve(res)
            cres = rhs - self.K @ cand
            cerr = np.linalg.norm(cres, np.inf)
            if cerr >= err:
                break
            sol, res, err = cand, cres, cerr
        n, p, m = self.n, self.p, self.cones.m
        return sol[:n], sol[n:n + p], sol[n + p:n + p + m]


# ---------------------------------------------------------------------------
# equilibration


def _ruiz(A, G, cones: _Cones, sweeps: int):
    n = G.shape[1]
    D = np.ones(n)
    Ea = np.ones(A.shape[0])
    Eg = np.ones(G.shape[0])
    A = A.tocsc(copy=True)
    G = G.tocsc(copy=True)
    for _ in range(sweeps):
        M = sp.vstack([A, G], format="csc")
        absM = abs(M)
        col = absM.max(axis=0).toarray().ravel()
        col[col == 0] = 1.0
        rown = absM.max(axis=1).toarray().ravel()
        rown[rown == 0] = 1.0
        ra = rown[: A.shape[0]]
        rg = rown[A.shape[0]:].copy()
        for blk in cones.blocks():
            rg[blk] = np.max(rg[blk])
        dc = 1.0 / np.sqrt(col)
        da = 1.0 / np.sqrt(ra)
        dg = 1.0 / np.sqrt(rg)
        D *= dc
        Ea *= da
        Eg *= dg
        A = sp.diags(da) @ A @ sp.diags(dc)
        G = sp.diags(dg) @ G @ sp.diags(dc)
    return A.tocsc(), G.tocsc(), D, Ea, Eg


# ---------------------------------------------------------------------------
# driver


def solve_reference(prog: ConicProgram, settings: SolverSettings | None = None, initial=None) -> ConicSolution:
    settings = settings or SolverSettings()
    t0 = time.perf_counter()
    cones = _Cones(prog.dims)
    n, p, m = prog.n, prog.A.shape[0], prog.dims.m
    c0, b0, h0 = np.asarray(prog.c, float), np.asarray(prog.b, float), np.asarray(prog.h, float)
    if settings.scaling:
        A, G, D, Ea, Eg = _ruiz(prog.A, prog.G, cones, settings.ruiz_sweeps)
    else:
        A, G = prog.A.tocsc(), prog.G.tocsc()
        D, Ea, Eg = np.ones(n), np.ones(p), np.ones(m)
    c = D * c0
    b = Ea * b0
    h = Eg * h0

    kkt = _KKT(A, G, cones, reg=settings.regularization)
    e = cones.identity()
    diag = {"min_pivot": np.nan}

    def unscale(x, y, z, s, tau):
        return D * x / tau, Ea * y / tau, Eg * z / tau, s / Eg / tau

    def residuals(x, y, z, s):
        pres = max(
            np.linalg.norm(prog.A @ x - b0, np.inf) if p else 0.0,
            np.linalg.norm(prog.G @ x + s - h0, np.inf) if m else 0.0,
        ) / max(1.0, np.linalg.norm(b0, np.inf) if p else 0.0, np.linalg.norm(h0, np.inf) if m else 0.0)
        dres = np.linalg.norm((prog.A.T @ y if p else 0.0) + prog.G.T @ z + c0, np.inf) / max(1.0, np.linalg.norm(c0, np.inf))
        pcost = float(c0 @ x)
        dcost = float(-(b0 @ y) - h0 @ z)
        gap = abs(pcost - dcost) / max(1.0, min(abs(pcost), abs(dcost)))
        gap = max(gap, float(s @ z) / max(1.0, abs(pcost)))
        return pres, dres, gap, pcost, dcost

    # --- starting point
    try:
        kkt.factor(_Scaling(cones, e, e))
    except RuntimeError as exc:
        return _failure(prog, t0, 0, f"initial factorization failed: {exc}", diag)
    x, y, zz = kkt.solve(np.zeros(n), b, h)
    s = -zz
    x2, y2, z = kkt.solve(-c, np.zeros(p), np.zeros(m))
    if initial is not None and settings.warm_start:
        x = np.asarray(initial, float) / D
        s = h - G @ x
    for vec in (s, z):
        me = cones.min_eig(vec)
        if me <= 1e-8 * max(1.0, np.linalg.norm(vec)):
            vec += (1.0 + max(0.0, -me)) * e
    y = y2
    tau = kappa = 1.0

    status = "max-iterations"
    it = 0
    last = best = None
    for it in range(settings.max_iter + 1):
        xs, ys, zs, ss = unscale(x, y, z, s, tau)
        pres, dres, gap, pcost, dcost = residuals(xs, ys, zs, ss)
        last = (xs, ys, zs, ss, pres, dres, gap, pcost, dcost)
        merit = max(pres, dres, gap)
        if best is None or merit < best[0]:
            best = (merit, last)
        if pres <= settings.tol and dres <= settings.tol and gap <= settings.tol:
            status = "optimal"
            break
        # Infeasibility certificates (on the homogeneous iterate).
        hz_by = float(h @ z + b @ y)
        if hz_by < 0:
            cert = np.linalg.norm(A.T @ y + G.T @ z, np.inf) / -hz_by
            if cert <= settings.tol and tau < 1e-3 * kappa:
                status = "primal-infeasible"
                break
        cx = float(c @ x)
        if cx < 0:
            cert = max(
                np.linalg.norm(A @ x, np.inf) if p else 0.0,
                np.linalg.norm(G @ x + s, np.inf),
            ) / -cx
            if cert <= settings.tol and tau < 1e-3 * kappa:
                status = "dual-infeasible"
                break
        if it == settings.max_iter:
            break

        mu = (s @ z + tau * kappa) / (cones.degree + 1)
        rx = A.T @ y + G.T @ z + c * tau
        ry = -(A @ x) + b * tau
        rz = s + G @ x - h * tau
        rt = kappa + c @ x + b @ y + h @ z

        try:
            W = _Scaling(cones, s, z)
            kkt.factor(W)
        except (RuntimeError, FloatingPointError) as exc:
            status = "numerical-failure"
            diag["message"] = f"factorization failed: {exc}"
            break
        diag["min_pivot"] = kkt.min_pivot
        lam = W.apply(z)
        x1, y1, z1 = kkt.solve(-c, b, h)
        denom_base = c @ x1 + b @ y1 + h @ z1

        def direction(eta, dsz, dtk):
            r = cones.div(lam, dsz)
            x2, y2, z2 = kkt.solve(-eta * rx, eta * ry, -eta * rz - W.apply(r))
            denom = denom_base - kappa / tau
            dtau = (-eta * rt - dtk / tau - c @ x2 - b @ y2 - h @ z2) / denom
            dx = x2 + dtau * x1
            dy = y2 + dtau * y1
            dz = z2 + dtau * z1
            dzs = W.apply(dz)               # scaled dz
            dss = r - dzs                   # scaled ds
            dkap = (dtk - kappa * dtau) / tau
            return dx, dy, dz, dzs, dss, dtau, dkap

        # predictor
        dsz = -cones.prod(lam, lam)
        dtk = -tau * kappa
        dx, dy, dz, dzs, dss, dtau, dkap = direction(1.0, dsz, dtk)
        a_aff = _step(cones, lam, dss, dzs, tau, dtau, kappa, dkap)
        sigma = (1.0 - min(1.0, a_aff)) ** 3
        # corrector
        dsz = -cones.prod(lam, lam) - cones.prod(dss, dzs) + sigma * mu * e
        dtk = -tau * kappa - dtau * dkap + sigma * mu
        dx, dy, dz, dzs, dss, dtau, dkap = direction(1.0 - sigma, dsz, dtk)
        alpha = min(1.0, settings.step_fraction * _step(cones, lam, dss, dzs, tau, dtau, kappa, dkap))
        if not np.isfinite(alpha) or alpha < 1e-12:
            status = "numerical-failure"
            diag["message"] = "step length collapsed"
            break

        ds = W.apply(dss)
        # Near convergence the cone step can overshoot by roundoff; back off
        # until both iterates are strictly interior.
        for _ in range(40):
            if _interior(cones, s + alpha * ds) and _interior(cones, z + alpha * dz):
                break
            alpha *= 0.5
        else:
            status = "numerical-failure"
            diag["message"] = "iterate left the cone interior"
            break
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkap
        if not (np.all(np.isfinite(x)) and np.isfinite(tau)) or tau <= 0 or kappa < 0:
            status = "numerical-failure"
            diag["message"] = "non-finite iterate"
            break

    if status == "numerical-failure" and best is not None:
        last = best[1]
    xs, ys, zs, ss, pres, dres, gap, pcost, dcost = last
    if status == "primal-infeasible":
        scale = -float(h @ z + b @ y)
        xs, ys, zs, ss = np.full(n, np.nan), Ea * y / scale, Eg * z / scale, np.full(m, np.nan)
    elif status == "dual-infeasible":
        scale = -float(c @ x)
        xs, ys, zs, ss = D * x / scale, np.full(p, np.nan), np.full(m, np.nan), s / Eg / scale
    diag["tau"] = float(tau)
    diag["kappa"] = float(kappa)
    return ConicSolution(
        x=xs, y=ys, z=zs, s=ss, status=status, primal_residual=pres, dual_residual=dres,
        gap=gap, iterations=it, solve_time=time.perf_counter() - t0,
        objective=pcost + prog.offset, dual_objective=dcost + prog.offset,
        solver="reference", var_blocks=dict(prog.var_blocks), diagnostics=diag,
    )


def _interior(cones: _Cones, u) -> bool:
    if cones.l and not np.all(u[: cones.l] > 0):
        return False
    for blk in cones.blocks():
        ub = u[blk]
        if not (ub[0] > 0 and ub[0] * ub[0] - ub[1:] @ ub[1:] > 0):
            return False
    return True


def _step(cones, lam, dss, dzs, tau, dtau, kappa, dkap) -> float:
    a = min(cones.max_step(lam, dss), cones.max_step(lam, dzs))
    if dtau < 0:
        a = min(a, -tau / dtau)
    if dkap < 0:
        a = min(a, -kappa / dkap)
    return a


def _failure(prog, t0, it, msg, diag) -> ConicSolution:
    diag = dict(diag, message=msg)
    n, p, m = prog.n, prog.A.shape[0], prog.dims.m
    nan = np.nan
    return ConicSolution(
        x=np.full(n, nan), y=np.full(p, nan), z=np.full(m, nan), s=np.full(m, nan),
        status="numerical-failure", primal_residual=nan, dual_residual=nan, gap=nan,
        iterations=it, solve_time=time.perf_counter() - t0, objective=nan, dual_objective=nan,
        solver="reference", var_blocks=dict(prog.var_blocks), diagnostics=diag,
    )
