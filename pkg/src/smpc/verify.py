"""Invariant suites run by ``smpc verify``.

Each suite returns ``{"passed": bool, ...witnesses}``; a suite that cannot
run because an earlier prerequisite failed is reported as failed with the
reason, never silently skipped.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog

from .chance import cantelli_tighten
from .config import RunConfig
from .controller import Controller, check_steady_state, drift_constants
from .horizon import build_horizon_operators
from .model import discrete_lyapunov, spectral_radius, validate_system
from .saturation import saturated_support, saturation_moments

MOMENT_QUAD_TOL = 1e-8
MOMENT_QMC_TOL = 1e-4
DUALITY_TOL = 1e-8


def _suite(fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # a crashing suite is a failing suite
        return {"passed": False, "error": f"{type(exc).__name__}: {exc}"}


def suite_system(rc: RunConfig) -> dict:
    rep = validate_system(rc.problem.sys, rc.problem.U, rc.problem.X)
    return {"passed": rep.passed, "checks": rep.as_dict()}


def suite_lyapunov(rc: RunConfig) -> dict:
    A = rc.problem.sys.A
    rho = spectral_radius(A)
    if not rho < 1.0:
        return {"passed": False, "error": f"unstable system (spectral radius {rho:.6g})"}
    P = discrete_lyapunov(A)
    res = float(np.linalg.norm(A.T @ P @ A - P + np.eye(A.shape[0])) / np.linalg.norm(P))
    return {"passed": res <= 1e-10, "relative_residual": res, "lambda_max_P": float(np.linalg.eigvalsh(P).max())}


def suite_setpoints(rc: RunConfig) -> dict:
    out = []
    ok = True
    for seg in rc.controller.setpoints:
        res = check_steady_state(rc.problem.sys, seg.x_ss, seg.u_ss)
        margin = float(rc.problem.U.interior_margin(seg.u_ss))
        ok &= margin > 0
        out.append({"start_step": seg.start_step, "residual": res, "input_margin": margin})
    return {"passed": bool(ok), "segments": out}


def suite_moments(rc: RunConfig) -> dict:
    sys = rc.problem.sys
    pol = rc.controller.saturation
    N = 1
    if sys.disturbance.family != "gaussian":
        # no closed-form reference: check that two scrambled point sets agree
        a = saturation_moments(pol, sys, N, method="quasi_random", seed=0)
        b = saturation_moments(pol, sys, N, method="quasi_random", seed=1)
        d = max(float(np.max(np.abs(a.block1 - b.block1))), float(np.max(np.abs(a.block2 - b.block2))))
        eig = float(np.linalg.eigvalsh(a.block1).min())
        return {"passed": bool(d <= MOMENT_QMC_TOL and eig >= -1e-12), "reference": "quasi_random (two seeds)",
                "seed_to_seed": d, "omega1_min_eig": eig}
    ref = saturation_moments(pol, sys, N, method="quadrature")
    qmc = saturation_moments(pol, sys, N, method="quasi_random")
    out = {"reference": "quadrature"}
    ok = True
    if pol.kind == "hard_clip":
        try:
            ana = saturation_moments(pol, sys, N, method="analytic")
        except ValueError as exc:
            out["analytic"] = f"not applicable: {exc}"
        else:
            d = max(float(np.max(np.abs(ana.block1 - ref.block1))), float(np.max(np.abs(ana.block2 - ref.block2))))
            out["analytic_vs_quadrature"] = d
            ok &= d <= MOMENT_QUAD_TOL
    d = max(float(np.max(np.abs(qmc.block1 - ref.block1))), float(np.max(np.abs(qmc.block2 - ref.block2))))
    out["quasi_random_vs_quadrature"] = d
    ok &= d <= MOMENT_QMC_TOL
    out["omega1_min_eig"] = float(np.linalg.eigvalsh(ref.block1).min())
    ok &= out["omega1_min_eig"] >= -1e-12
    out["passed"] = bool(ok)
    return out


def input_tightening_lp(row: np.ndarray, W) -> float:
    """``min k_w'z  s.t.  H_w'z = row, z >= 0`` (the dual of ``max row'w`` over W)."""
    res = linprog(W.k, A_eq=W.H.T, b_eq=row, bounds=[(0, None)] * W.rows, method="highs")
    if res.status != 0:
        raise RuntimeError(f"duality LP failed: {res.message}")
    return float(res.fun)


def box_support(row: np.ndarray, W) -> float:
    """``max row'w`` over a box W, evaluated at the maximizing vertex."""
    lo, hi = W.box_bounds()
    return float(np.sum(np.where(row > 0, row * hi, row * lo)))


def suite_input_duality(rc: RunConfig, seed: int = 0, trials: int = 3) -> dict:
    sys = rc.problem.sys
    cfg = rc.controller
    ops = build_horizon_operators(sys, rc.problem.U, rc.problem.X, cfg.weights, cfg.N)
    W = saturated_support(cfg.saturation, cfg.N, sys.n_x)
    ctrl = Controller(rc.problem, cfg, "smpc")
    lay = ctrl.builder(0).layout
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        m = rng.standard_normal(lay.n_m)
        M = np.zeros((lay.n_v, sys.n_x * cfg.N))
        M[lay.m_rows, lay.m_cols] = m
        HM = ops.bigHu @ M
        for row in HM:
            worst = max(worst, abs(input_tightening_lp(row, W) - box_support(row, W)))
    return {"passed": worst <= DUALITY_TOL, "max_abs_difference": worst, "rows_checked": trials * ops.bigHu.shape[0]}


def suite_chance(rc: RunConfig) -> dict:
    sys = rc.problem.sys
    cfg = rc.controller
    ops = build_horizon_operators(sys, rc.problem.U, rc.problem.X, cfg.weights, cfg.N)
    tight = cantelli_tighten(cfg.chance, ops)
    caps = np.array([t.var_cap for t in tight])
    gaps = np.array([ops.kx[t.j] - t.mean_rhs for t in tight])
    ok = bool(np.all(caps > 0) and np.all(gaps > 0))
    return {"passed": ok, "rows": len(tight), "min_variance_cap": float(caps.min()), "min_tightening": float(gaps.min()),
            "alpha_sum": float(np.sum(cfg.chance.alpha))}


def suite_feasibility(rc: RunConfig) -> dict:
    ctrl = Controller(rc.problem, rc.controller, "smpc")
    bld = ctrl.builder(0)
    x_ss = ctrl.setpoints[0].x_ss
    prog = bld.program(np.zeros(rc.problem.sys.n_x))
    cert = prog.cone_membership(bld.feasible_point(np.zeros(rc.problem.sys.n_x)))
    sol, bld, _ = ctrl.solve_at(x_ss, 0)
    slack = float(np.max(bld.layout.slacks_from(sol.x), initial=0.0)) if sol.x is not None else np.inf
    ok = cert <= 1e-9 and sol.status == "optimal" and slack < 1e-6
    return {"passed": bool(ok), "certificate_violation": cert, "status": sol.status, "max_slack_at_setpoint": slack,
            "iterations": sol.iterations}


def suite_drift(rc: RunConfig) -> dict:
    sys = rc.problem.sys
    if not spectral_radius(sys.A) < 1.0:
        return {"passed": False, "error": "unstable system"}
    P = discrete_lyapunov(sys.A)
    c = drift_constants(sys, rc.problem.U, P)
    return {"passed": "lam" in c, **c}


SUITES = (
    ("system", suite_system),
    ("lyapunov", suite_lyapunov),
    ("setpoints", suite_setpoints),
    ("moments", suite_moments),
    ("input_duality", suite_input_duality),
    ("chance_tightening", suite_chance),
    ("softened_feasibility", suite_feasibility),
    ("drift_constants", suite_drift),
)


def verification_suites(rc: RunConfig) -> dict:
    report = {}
    stable = spectral_radius(rc.problem.sys.A) < 1.0
    for name, fn in SUITES:
        if not stable and name in ("softened_feasibility",):
            report[name] = {"passed": False, "error": "skipped: system is not Schur stable"}
            continue
        report[name] = _suite(fn, rc)
    return {"passed": all(v["passed"] for v in report.values()), "suites": report}
