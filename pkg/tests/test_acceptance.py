"""Acceptance criteria.

Each test prints (and records for the terminal summary) one line
``CRITERION k PASS|FAIL <detail>``.  The ABE ensembles behind criteria 1-4
and part of 10 take about an hour on one core; they are computed once per
session.
"""

from __future__ import annotations

import filecmp
import itertools
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

from smpc.chance import ChanceSpec, cantelli_tighten, variance_cap
from smpc.cli import calibration_probes
from smpc.config import bundled_config, load_config
from smpc.controller import ControllerConfig, Controller, calibrate_rho, drift_check, monte_carlo
from smpc.horizon import build_horizon_operators
from smpc.model import FAMILIES, DisturbanceModel, LinearStochasticSystem, Polytope, WeightSpec
from smpc.saturation import SaturationPolicy, saturated_support, saturation_moments
from smpc.socp import closed_form_cost, constant_cost, feedback_pattern
from smpc.solver import SolverSettings
from smpc.verify import input_tightening_lp

from conftest import CRITERION_LINES, random_system, scalar_problem

pytestmark = pytest.mark.slow


def record(k: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {k} {'PASS' if ok else 'FAIL'} {detail}"
    CRITERION_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared ABE ensembles (criteria 1-4, 10)


@pytest.fixture(scope="session")
def abe():
    rc = load_config(bundled_config("abe"))
    exp = rc.experiment
    x0 = rc.controller.setpoints[0].x_ss
    out = {"rc": rc}
    for kind in ("smpc", "nominal"):
        out[kind] = monte_carlo(rc.problem, rc.controller, x0, exp.steps, exp.runs, base_seed=exp.seed,
                                kind=kind, snapshot_steps=exp.snapshot_steps)
    return out


def test_c1_abe_chance_constraints(abe):
    ens = abe["smpc"]
    clean = int(np.sum(~ens.run_violations))
    record(1, clean >= 99 and ens.runs == 100,
           f"SMPC runs with zero acetate/butyrate violations: {clean}/{ens.runs} (need >= 99); "
           f"degraded steps {ens.degraded}")


def test_c2_nominal_baseline_violates(abe):
    ens = abe["nominal"]
    frac = ens.fraction_violating
    record(2, 0.05 <= frac <= 0.40 and ens.runs == 100,
           f"nominal-MPC fraction of runs violating: {frac:.2f} (need 0.05-0.40)")


def test_c3_setpoint_tracking_with_offset(abe):
    rc, ens = abe["rc"], abe["smpc"]
    p = rc.problem
    target = np.asarray(rc.setpoint_values[-1][1], dtype=float)
    idx = list(rc.tracked)
    X = p.absolute_x(np.stack([tr.x for tr in ens.traces]))[:, :, idx]    # (runs, T+1, 3)
    steps_per_hr = 1.0 / rc.sampling_period_hr
    window = slice(int(round(15 * steps_per_hr)), X.shape[1])             # last 5 h after the 10 h step
    mean_traj = X.mean(axis=0)[window]
    rel = np.abs(mean_traj - target) / target
    within = bool(np.all(rel <= 0.10))
    per_run = X[:, window, :].mean(axis=1)                                 # time average per run
    offset = per_run.mean(axis=0) - target
    se = per_run.std(axis=0, ddof=1) / np.sqrt(per_run.shape[0])
    nonzero = bool(np.any(np.abs(offset) > 3.0 * se))
    names = [p.state_names[i] for i in idx]
    detail = ", ".join(f"{n}: max rel err {r:.3%}, offset {o:+.4f} (se {s:.4f})"
                       for n, r, o, s in zip(names, rel.max(axis=0), offset, se))
    record(3, within and nonzero, f"settled within 10%: {within}; nonzero offset: {nonzero}; {detail}")


def test_c4_hard_input_bounds(abe):
    rc = abe["rc"]
    lo, hi = rc.problem.u_bounds
    worst = []
    ok = True
    for kind in ("smpc", "nominal"):
        U = np.concatenate([tr.u_abs for tr in abe[kind].traces])
        ok &= bool(np.all(U >= lo) and np.all(U <= hi))
        worst.append(f"{kind}: min {U.min(axis=0).tolist()} max {U.max(axis=0).tolist()}")
    record(4, ok, f"all applied inputs inside D [0.05, 0.10], G0 [56, 389] exactly; " + "; ".join(worst))


# ---------------------------------------------------------------------------
# criterion 5: dual tightening equals the vertex maximum


def test_c5_input_dual_matches_vertex_enumeration():
    rng = np.random.default_rng(505)
    worst = 0.0
    rows = 0
    for _ in range(100):
        n_x = int(rng.integers(1, 3))
        n_u = int(rng.integers(1, 3))
        N = int(rng.integers(1, 4))
        sys = random_system(rng, n_x, n_u)
        lo = -rng.uniform(0.2, 2.0, n_u)
        hi = rng.uniform(0.2, 2.0, n_u)
        U = Polytope.box(lo, hi)
        ops = build_horizon_operators(sys, U, Polytope.box(-np.ones(n_x), np.ones(n_x)),
                                      WeightSpec(np.eye(n_x), np.eye(n_u)), N)
        pol = SaturationPolicy("hard_clip", float(rng.uniform(0.1, 3.0)))
        W = saturated_support(pol, N, n_x)
        M = np.zeros((n_u * N, n_x * N))
        r_idx, c_idx = feedback_pattern(N, n_u, n_x)
        M[r_idx, c_idx] = rng.normal(size=r_idx.size)
        verts = np.array(list(itertools.product(*[(-pol.phi_max, pol.phi_max)] * (n_x * N))))
        HM = ops.bigHu @ M
        for row in HM:
            brute = float(np.max(verts @ row))
            worst = max(worst, abs(input_tightening_lp(row, W) - brute))
            rows += 1
    record(5, worst <= 1e-8, f"max |dual LP - vertex max| = {worst:.3e} over {rows} rows of 100 instances (need <= 1e-8)")


# ---------------------------------------------------------------------------
# criterion 6: Cantelli tightening under non-Gaussian noise


SAMPLES = 1_000_000


def _allowed(alpha: float, n: int = SAMPLES) -> float:
    return alpha + 3.0 * np.sqrt(alpha * (1.0 - alpha) / n)


def test_c6_cantelli_validity():
    details = []
    ok = True
    rng = np.random.default_rng(606)

    # (a) scalar constraint sitting exactly on the tightened boundary:
    #     mean = k - delta, variance = alpha delta^2 / (1 - alpha)
    k, delta = 1.0, 0.5
    for family in FAMILIES:
        dist = DisturbanceModel(np.eye(1), family)
        for alpha in (0.05, 0.1, 0.2, 0.4):
            sd = np.sqrt(variance_cap(alpha, delta))
            z = (k - delta) + sd * dist.standard(rng, SAMPLES)
            freq = float(np.mean(z > k))
            ok &= freq <= _allowed(alpha)
        details.append(f"{family} boundary case ok={ok}")

    # (b) tightened rows of the optimised open-loop policy (saturated feedback)
    for family in FAMILIES:
        prob = scalar_problem(x_max=6.0, family=family)
        cfg = ControllerConfig(
            N=3, weights=WeightSpec(np.eye(1), np.eye(1), rho=1e4),
            chance=ChanceSpec(np.full(2, 0.1), np.full(2, 3.4)),
            saturation=SaturationPolicy("hard_clip", 3.0),
            moment_method="analytic" if family == "gaussian" else "quasi_random",
            solver=SolverSettings(backend="clarabel", tol=1e-10),
        )
        ctrl = Controller(prob, cfg)
        worst = 0.0
        for x0 in (6.0, -5.0, 2.0):
            sol, bld, _ = ctrl.solve_at(np.array([x0]))
            slack = float(np.max(bld.layout.slacks_from(sol.x)))
            ok &= sol.status == "optimal" and slack <= 1e-7
            ops = bld.ops
            M, v = bld.layout.M_from(sol.x), bld.layout.v_from(sol.x)
            w = prob.sys.disturbance.sample(rng, SAMPLES * ops.N).reshape(SAMPLES, ops.N)
            gw = w @ ops.bigG.T
            u = cfg.saturation(gw) @ M.T + v
            xs = ops.bigA @ np.array([x0]) + u @ ops.bigB.T + gw @ ops.bigD.T
            for t in cantelli_tighten(cfg.chance, ops):
                freq = float(np.mean(xs @ t.row > t.bound))
                worst = max(worst, freq)
                ok &= freq <= _allowed(0.1)
        details.append(f"{family} closed-form policy worst row frequency {worst:.2e}")
    record(6, bool(ok), f"empirical ICC violation <= alpha + 3 se with {SAMPLES} samples: " + "; ".join(details))


# ---------------------------------------------------------------------------
# criterion 7: exact penalty on the scalar toy system


def test_c7_exact_penalty():
    rc = load_config(bundled_config("toy"))
    cfg = rc.controller
    hard_ctrl = Controller(rc.problem, cfg)
    feasible = []
    for x in calibration_probes(rc, 60, seed=rc.experiment.seed):
        sol, _, _ = hard_ctrl.solve_at(x, soft=False)
        if sol.status == "optimal":
            feasible.append(x)
    # spread the 20 probes over the feasible set, including states next to
    # the boundary where the tightened rows are active
    pick = np.unique(np.round(np.linspace(0, len(feasible) - 1, 20)).astype(int)) if feasible else []
    probes = [feasible[i] for i in pick]
    active = 0
    for x in probes:
        sol, bld, seg = hard_ctrl.solve_at(x, soft=False)
        prog = bld.program(x - seg.x_ss)
        cone_slack = prog.h - prog.G @ sol.x
        gaps = []
        for name, a, b in prog.cone_labels:
            blk = cone_slack[a:b]
            if name == "state_mean":
                gaps.extend(blk)
            elif name.startswith("state_var"):
                gaps.append(blk[0] - np.linalg.norm(blk[1:]))
        active += bool(min(gaps) <= 1e-6)
    rep = calibrate_rho(rc.problem, cfg, probes, list(10.0 ** np.arange(-2, 7)))
    if not rep.ok or len(probes) < 20:
        record(7, False, f"calibration failed: {rep.diagnostics}; feasible probes {len(probes)}")
    soft_ctrl = Controller(rc.problem, cfg.with_rho(rep.rho_star))
    dev = slack = 0.0
    for x in probes:
        hs, hb, _ = hard_ctrl.solve_at(x, soft=False)
        ss, sb, _ = soft_ctrl.solve_at(x)
        dev = max(dev, float(np.max(np.abs(sb.layout.v_from(ss.x) - hb.layout.v_from(hs.x)))))
        slack = max(slack, float(np.max(sb.layout.slacks_from(ss.x))))
    record(7, dev <= 1e-6 and slack <= 1e-7 and active > 0,
           f"rho* = {rep.rho_star:g} on {len(probes)} feasible probes ({active} with active tightened rows): max ||v_soft - v_hard||_inf = {dev:.2e} "
           f"(need <= 1e-6), max slack {slack:.2e} (need <= 1e-7)")


# ---------------------------------------------------------------------------
# criterion 8: closed-form cost vs Monte Carlo rollout


def _rollout_cost(sys, x0, M, v, N, Q, R, policy, rng, samples, batch=20_000):
    n_x, n_u, n_w = sys.n_x, sys.n_u, sys.n_w
    costs = []
    done = 0
    while done < samples:
        k = min(batch, samples - done)
        w = sys.disturbance.sample(rng, k * N).reshape(k, N, n_w)
        phi = policy(w @ sys.G.T)                                   # (k, N, n_x)
        x = np.tile(x0, (k, 1))
        J = np.einsum("si,ij,sj->s", x, Q, x)
        for t in range(N):
            u = np.tile(v[t * n_u:(t + 1) * n_u], (k, 1))
            for tau in range(t):
                u += phi[:, tau] @ M[t * n_u:(t + 1) * n_u, tau * n_x:(tau + 1) * n_x].T
            J += np.einsum("si,ij,sj->s", u, R, u)
            x = x @ sys.A.T + u @ sys.B.T + w[:, t] @ sys.G.T
            J += np.einsum("si,ij,sj->s", x, Q, x)
        costs.append(J)
        done += k
    c = np.concatenate(costs)
    return float(c.mean()), float(c.std(ddof=1) / np.sqrt(c.size))


def test_c8_cost_matches_monte_carlo():
    rng = np.random.default_rng(808)
    zs = []
    for case in range(10):
        n_x, n_u, N = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
        sys = random_system(rng, n_x, n_u)
        Q = np.diag(rng.uniform(0.5, 2.0, n_x))
        R = np.diag(rng.uniform(0.1, 1.0, n_u))
        weights = WeightSpec(Q, R)
        ops = build_horizon_operators(sys, Polytope.box(-np.ones(n_u), np.ones(n_u)),
                                      Polytope.box(-np.ones(n_x), np.ones(n_x)), weights, N)
        kind = "hard_clip" if case % 3 else "sigmoid"
        policy = SaturationPolicy(kind, float(rng.uniform(0.3, 2.0)))
        moments = saturation_moments(policy, sys, N, method="quadrature")
        M = np.zeros((n_u * N, n_x * N))
        r_idx, c_idx = feedback_pattern(N, n_u, n_x)
        M[r_idx, c_idx] = rng.normal(size=r_idx.size)
        v = rng.normal(size=n_u * N)
        x0 = rng.normal(size=n_x)
        closed = closed_form_cost(x0, M, v, ops, moments) + constant_cost(x0, ops, sys.Sigma_w)
        mc, se = _rollout_cost(sys, x0, M, v, N, Q, R, policy, rng, 100_000)
        zs.append((mc - closed) / se)
    worst = float(np.max(np.abs(zs)))
    record(8, worst <= 3.0, f"max |MC - closed form| / se = {worst:.2f} over 10 instances (need <= 3); "
           f"z = {np.round(zs, 2).tolist()}")


# ---------------------------------------------------------------------------
# criterion 9: N = 2 scalar program against a 201^3 grid


def test_c9_solver_matches_grid_search():
    a, b, g, var = 0.9, 1.0, 1.0, 1.0
    k, delta, alpha, rho, phi_max = 5.0, 3.5, 0.1, 50.0, 3.0
    q = r = 1.0
    x0 = 2.5
    prob = scalar_problem(a=a, b=b, g=g, var=var, u_max=1.0, x_max=k)
    cfg = ControllerConfig(
        N=2, weights=WeightSpec(np.array([[q]]), np.array([[r]]), rho=rho),
        chance=ChanceSpec(np.full(2, alpha), np.full(2, delta)),
        saturation=SaturationPolicy("hard_clip", phi_max),
        solver=SolverSettings(tol=1e-10, backend="clarabel"),
    )
    sol, bld, _ = Controller(prob, cfg).solve_at(np.array([x0]))
    v_opt = bld.layout.v_from(sol.x)
    m_opt = bld.layout.M_from(sol.x)[1, 0]

    # independent oracle: moments by 1-D integration, cost written out by hand
    e1 = stats.norm.expect(lambda w: np.clip(g * w, -phi_max, phi_max) ** 2, scale=np.sqrt(var))
    e2 = stats.norm.expect(lambda w: np.clip(g * w, -phi_max, phi_max) * w, scale=np.sqrt(var))
    cap = alpha * delta ** 2 / (1 - alpha)

    def oracle(v0, v1, m, penalty=True):
        mean1 = a * x0 + b * v0
        mean2 = a * mean1 + b * v1
        var1 = g * g * var
        var2 = a * a * g * g * var + 2 * a * b * m * g * e2 + b * b * m * m * e1 + g * g * var
        cost = q * (x0 ** 2 + mean1 ** 2 + var1 + mean2 ** 2 + var2) + r * (v0 ** 2 + v1 ** 2 + m * m * e1)
        if penalty:
            for mean, vv in ((mean1, var1), (mean2, var2)):
                for sgn in (1.0, -1.0):
                    cost = cost + rho * (np.maximum(0.0, sgn * mean - (k - delta)) + np.maximum(0.0, vv - cap))
        return cost

    f_opt = oracle(v_opt[0], v_opt[1], m_opt)
    # the program drops the policy-independent constant, i.e. the expected
    # cost of the zero policy
    obj_err = abs(sol.objective + oracle(0.0, 0.0, 0.0, penalty=False) - f_opt)

    n = 201
    v0s = np.linspace(-1.0, 1.0, n)
    v1s = np.linspace(-1.0, 1.0, n)
    ms = np.linspace(-1.0 / phi_max, 1.0 / phi_max, n)
    V1, MM = np.meshgrid(v1s, ms, indexing="ij")
    feas = np.abs(V1) + phi_max * np.abs(MM) <= 1.0 + 1e-12
    best, arg = np.inf, None
    for v0 in v0s:
        f = np.where(feas, oracle(v0, V1, MM), np.inf)
        i = np.unravel_index(np.argmin(f), f.shape)
        if f[i] < best:
            best, arg = float(f[i]), (v0, V1[i], MM[i])
    # resolution: the objective change to the nearest feasible grid point
    near = [v0s[np.argmin(np.abs(v0s - v_opt[0]))]]
    cand = [(x, y, z) for x in near for y in v1s[np.abs(v1s - v_opt[1]) <= 0.011]
            for z in ms[np.abs(ms - m_opt) <= 0.0035] if abs(y) + phi_max * abs(z) <= 1.0 + 1e-12]
    assert cand, "no feasible grid point next to the optimum"
    res = min(oracle(*c) for c in cand) - f_opt
    steps = np.array([v0s[1] - v0s[0], v1s[1] - v1s[0], ms[1] - ms[0]])
    dist = np.abs(np.array(arg) - np.array([v_opt[0], v_opt[1], m_opt])) / steps
    ok = (f_opt <= best + 1e-9) and (best - f_opt <= res + 1e-12) and bool(np.all(dist <= 1.0)) and obj_err <= 1e-6
    record(9, ok, f"SOCP optimum {f_opt:.8f} vs grid {best:.8f} (gap {best - f_opt:.2e}, resolution {res:.2e}); "
                  f"argmin distance in grid cells {np.round(dist, 2).tolist()}; objective consistency {obj_err:.1e}")


# ---------------------------------------------------------------------------
# criterion 10: drift ceiling on the toy ensemble and boundedness on ABE


def test_c10_stochastic_stability(abe):
    rc = load_config(bundled_config("toy"))
    ens = monte_carlo(rc.problem, rc.controller, np.array([8.0]), 200, 500, base_seed=rc.experiment.seed)
    rep = drift_check(ens.traces, rc.problem.sys, rc.problem.U)
    toy_ok = rep.ceiling is not None and rep.max_ceiling_margin <= 0.0

    abe_rc, abe_ens = abe["rc"], abe["smpc"]
    V = np.stack([tr.lyapunov for tr in abe_ens.traces]).mean(axis=0)
    start = abe_rc.controller.setpoints[-1].start_step
    settle = start + (V.size - start) // 4
    mid = V[settle:settle + (V.size - settle) // 2]
    end = V[settle + (V.size - settle) // 2:]
    abe_ok = bool(np.all(np.isfinite(V))) and float(end.mean()) <= 1.5 * float(mid.mean())
    record(10, toy_ok and abe_ok,
           f"toy (500 runs x 200 steps, x0 = 8): max_t [mean V - ceiling] = {rep.max_ceiling_margin:.3f} "
           f"(lambda {rep.lam:.4f}, b {rep.b:.3f}); ABE mean V late/mid window = "
           f"{end.mean():.3e}/{mid.mean():.3e}, finite={bool(np.all(np.isfinite(V)))}")


# ---------------------------------------------------------------------------
# criterion 11: moment oracle


def test_c11_moment_oracle():
    cases = []
    abe_sys = load_config(bundled_config("abe")).problem.sys
    cases.append(("abe", abe_sys, 0.03))
    toy = scalar_problem().sys
    for c in (0.2, 1.0, 3.0):
        cases.append((f"toy phi_max={c}", toy, c))
    rng = np.random.default_rng(1111)
    for i in range(3):
        n = int(rng.integers(1, 4))
        sys = LinearStochasticSystem(0.5 * np.eye(n), np.ones((n, 1)), np.diag(rng.uniform(0.5, 2.0, n)),
                                     DisturbanceModel(np.diag(rng.uniform(0.1, 2.0, n))))
        cases.append((f"random {i}", sys, float(rng.uniform(0.2, 3.0))))
    worst_quad = worst_qmc = 0.0
    for _, sys, c in cases:
        pol = SaturationPolicy("hard_clip", c)
        ana = saturation_moments(pol, sys, 1, "analytic")
        qmc = saturation_moments(pol, sys, 1, "quasi_random")
        # 1-D integration against the Gaussian density, written independently
        sd = np.sqrt(np.diag(sys.G @ sys.Sigma_w @ sys.G.T))
        b1 = np.diag([integrate.quad(lambda a: np.clip(a, -c, c) ** 2 * stats.norm.pdf(a, scale=s), -12 * s, 12 * s,
                                     points=[-c, c] if c < 12 * s else None, limit=200, epsabs=1e-14)[0] for s in sd])
        gain = np.array([integrate.quad(lambda a: np.clip(a, -c, c) * a * stats.norm.pdf(a, scale=s), -12 * s, 12 * s,
                                        points=[-c, c] if c < 12 * s else None, limit=200, epsabs=1e-14)[0] / (s * s)
                         for s in sd])
        b2 = gain[:, None] * (sys.G @ sys.Sigma_w)
        worst_quad = max(worst_quad, float(np.max(np.abs(ana.block1 - b1))), float(np.max(np.abs(ana.block2 - b2))))
        worst_qmc = max(worst_qmc, float(np.max(np.abs(ana.block1 - qmc.block1))),
                        float(np.max(np.abs(ana.block2 - qmc.block2))))
    record(11, worst_quad <= 1e-8 and worst_qmc <= 1e-4,
           f"{len(cases)} cases: max |closed form - integration| = {worst_quad:.2e} (need <= 1e-8), "
           f"max |closed form - quasi-random| = {worst_qmc:.2e} (need <= 1e-4)")


# ---------------------------------------------------------------------------
# criterion 12: determinism of simulate


def _simulate(out: Path, *args):
    cmd = [sys.executable, "-m", "smpc", "simulate", "--out", str(out), *args]
    return subprocess.run(cmd, capture_output=True, text=True, check=True)


def _compare(a: Path, b: Path) -> list[str]:
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "timing.txt")
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != "timing.txt")
    if files != other:
        return ["file lists differ"]
    return [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]


def test_c12_simulate_is_deterministic(tmp_path):
    runs = [
        ("toy", ["--config", "toy", "--seed", "11"]),
        ("abe", ["--config", "abe", "--seed", "11", "--runs", "1"]),
    ]
    diffs = []
    counted = 0
    for name, args in runs:
        a, b = tmp_path / f"{name}_a", tmp_path / f"{name}_b"
        _simulate(a, *args)
        _simulate(b, *args)
        diffs += [f"{name}:{d}" for d in _compare(a, b)]
        counted += sum(1 for p in a.rglob("*") if p.is_file() and p.name != "timing.txt")
    record(12, not diffs and counted > 0,
           f"{counted} CSV/JSON/SVG files compared across repeated invocations; differing: {diffs or 'none'}")
