import numpy as np
import pytest

from smpc.chance import ChanceSpec, cantelli_tighten
from smpc.horizon import build_horizon_operators
from smpc.model import Polytope, WeightSpec
from smpc.saturation import SaturationPolicy, saturated_support, saturation_moments
from smpc.socp import SocpBuilder, closed_form_cost, feedback_pattern
from smpc.solver import SolverSettings, solve

from conftest import random_system

cp = pytest.importorskip("cvxpy")


def _instance(rng, case):
    n_x = int(rng.integers(1, 3))
    n_u = int(rng.integers(1, 3))
    N = int(rng.integers(1, 4))
    sys = random_system(rng, n_x, n_u)
    if case % 2 == 0:
        sys = type(sys)(sys.A, sys.B, np.eye(n_x), sys.disturbance)
    U = Polytope.box(-np.full(n_u, rng.uniform(0.5, 2)), np.full(n_u, rng.uniform(0.5, 2)))
    X = Polytope.box(-2 * np.ones(n_x), 2 * np.ones(n_x))
    w = WeightSpec(np.eye(n_x), 0.1 * np.eye(n_u), rho=50.0)
    ops = build_horizon_operators(sys, U, X, w, N)
    pol = SaturationPolicy("hard_clip", 1.0)
    mom = saturation_moments(pol, sys, N, method="analytic" if case % 2 == 0 else "quadrature")
    tight = cantelli_tighten(ChanceSpec(np.full(X.rows, 0.1), np.full(X.rows, 0.5)), ops)
    return sys, ops, mom, tight, w, saturated_support(pol, N, n_x)


def _sqrtm(S):
    ev, V = np.linalg.eigh(S)
    return V @ np.diag(np.sqrt(np.maximum(ev, 0))) @ V.T


def cvxpy_oracle(x0, sys, ops, mom, tight, w, W):
    """The same program written directly in a modelling language."""
    N, n_x, n_u = ops.N, ops.n_x, ops.n_u
    B, Q, R, D, Gb = ops.bigB, ops.bigQ, ops.bigR, ops.bigD, ops.bigG
    S1 = B.T @ Q @ B + R
    S2 = 2 * Gb.T @ D.T @ Q @ B
    b = 2 * B.T @ Q @ ops.bigA @ x0
    M = cp.Variable((n_u * N, n_x * N))
    v = cp.Variable(n_u * N)
    mask = np.array([[1.0 if a // n_u > k // n_x else 0.0 for k in range(n_x * N)] for a in range(n_u * N)])
    Z = cp.Variable((W.rows, ops.s * N), nonneg=True)
    em = cp.Variable(len(tight), nonneg=True)
    ev = cp.Variable(len(tight), nonneg=True)
    O1h, S1h = _sqrtm(mom.Omega1), _sqrtm(S1)
    obj = (b @ v + cp.sum_squares(S1h @ v) + cp.sum_squares(S1h @ M @ O1h) + cp.trace(S2 @ M @ mom.Omega2)
           + w.rho * (cp.sum(em) + cp.sum(ev)))
    cons = [cp.multiply(1 - mask, M) == 0, ops.bigHu @ v + Z.T @ W.k <= ops.bigku, Z.T @ W.H == ops.bigHu @ M]
    DG = D @ Gb
    Swb = np.kron(np.eye(N), sys.Sigma_w)
    for idx, t in enumerate(tight):
        cons.append(t.row @ ops.bigA @ x0 + t.row @ B @ v <= t.mean_rhs + em[idx])
        y = M.T @ (B.T @ t.row)
        q = 2 * mom.Omega2 @ DG.T @ t.row
        c = t.row @ DG @ Swb @ DG.T @ t.row - t.var_cap
        cons.append(cp.sum_squares(O1h @ y) + q @ y + c <= ev[idx])
    pr = cp.Problem(cp.Minimize(obj), cons)
    pr.solve(solver=cp.CLARABEL, tol_feas=1e-10, tol_gap_abs=1e-10, tol_gap_rel=1e-10)
    return pr.value, v.value, M.value


@pytest.mark.parametrize("case", range(6))
@pytest.mark.parametrize("reduce_z", [True, False])
def test_program_matches_modelling_language(case, reduce_z):
    rng = np.random.default_rng(100 + case)
    sys, ops, mom, tight, w, W = _instance(rng, case)
    x0 = rng.normal(size=ops.n_x) * 1.5
    bld = SocpBuilder(ops, mom, sys.Sigma_w, tight, w, W, reduce_z=reduce_z)
    sol = solve(bld.program(x0), SolverSettings(tol=1e-9))
    ref_val, ref_v, ref_M = cvxpy_oracle(x0, sys, ops, mom, tight, w, W)
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(ref_val, rel=1e-6, abs=1e-6)
    # the objective is flat along some input directions when n_u > n_x, so
    # the minimiser is only pinned to about sqrt(tolerance)
    assert np.max(np.abs(bld.layout.v_from(sol.x) - ref_v)) <= 1e-3
    terms = bld.objective_terms(sol.x, x0)
    assert terms["total"] == pytest.approx(sol.objective, rel=1e-7, abs=1e-7)


def test_objective_terms_match_closed_form(rng):
    sys, ops, mom, tight, w, W = _instance(rng, 0)
    bld = SocpBuilder(ops, mom, sys.Sigma_w, tight, w, W)
    lay = bld.layout
    x = np.zeros(lay.n)
    x[lay.v] = rng.normal(size=lay.n_v)
    x[lay.m] = rng.normal(size=lay.n_m)
    x0 = rng.normal(size=ops.n_x)
    terms = bld.objective_terms(x, x0)
    expected = closed_form_cost(x0, lay.M_from(x), lay.v_from(x), ops, mom)
    assert terms["total"] == pytest.approx(expected, rel=1e-10, abs=1e-10)


def test_feasible_point_is_certified(rng):
    for case in range(4):
        sys, ops, mom, tight, w, W = _instance(rng, case)
        bld = SocpBuilder(ops, mom, sys.Sigma_w, tight, w, W)
        x0 = 10 * rng.normal(size=ops.n_x)  # far outside X
        assert bld.program(x0).cone_membership(bld.feasible_point(x0)) <= 1e-9


def test_feedback_is_strictly_causal():
    rows, cols = feedback_pattern(3, 2, 2)
    assert np.all(rows // 2 > cols // 2)
    assert rows.size == 2 * 2 * (1 + 2)


def test_slack_count_and_hard_mode(rng):
    sys, ops, mom, tight, w, W = _instance(rng, 1)
    soft = SocpBuilder(ops, mom, sys.Sigma_w, tight, w, W)
    hard = SocpBuilder(ops, mom, sys.Sigma_w, tight, w, W, soft=False)
    assert soft.layout.n_slack == 2 * ops.r * ops.N
    assert hard.layout.n_slack == 0


def test_nominal_program_has_no_feedback(rng):
    sys, ops, mom, tight, w, W = _instance(rng, 2)
    bld = SocpBuilder(ops, mom, sys.Sigma_w, tight, w, W, feedback=False, variance_rows=False)
    assert bld.layout.n_m == 0 and bld.layout.n_z == 0
    assert solve(bld.program(np.zeros(ops.n_x))).status == "optimal"
