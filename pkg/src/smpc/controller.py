"""Receding-horizon control, closed-loop simulation and ensemble checks.

Setpoints are handled by shifting coordinates: for each setpoint segment a
steady state ``(x_ss, u_ss)`` is computed and the regulation program is
solved for ``x - x_ss`` with the constraint sets shifted accordingly.
Everything here works in deviation coordinates about the plant operating
point; conversion to absolute units happens only at the input clip and in
the reporting layer.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .chance import ChanceSpec, TightenedStateConstraint, cantelli_tighten, default_delta
from .horizon import build_horizon_operators
from .model import LinearStochasticSystem, Polytope, WeightSpec, discrete_lyapunov
from .saturation import SaturationPolicy, saturated_support, saturation_moments, zero_moments
from .socp import SocpBuilder
from .solver import SolverSession, SolverSettings

log = logging.getLogger(__name__)

WORKERS_ENV = "SMPC_WORKERS"
CONTROLLERS = ("smpc", "nominal")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SetpointSegment:
    start_step: int
    x_ss: np.ndarray
    u_ss: np.ndarray


@dataclass(frozen=True)
class ControllerConfig:
    N: int
    weights: WeightSpec
    chance: ChanceSpec
    saturation: SaturationPolicy
    sampling_period_min: float = 1.0
    setpoints: tuple = ()
    moment_method: str = "analytic"
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be at least 1")
        if self.weights.rho < 0:
            raise ValueError("rho must be nonnegative")
        starts = [s.start_step for s in self.setpoints]
        if starts and (starts[0] != 0 or starts != sorted(set(starts))):
            raise ValueError("setpoint segments must start at step 0 and be strictly increasing")

    def with_rho(self, rho: float) -> "ControllerConfig":
        return replace(self, weights=self.weights.with_rho(rho))

    def segment_index(self, step: int) -> int:
        idx = 0
        for k, seg in enumerate(self.setpoints):
            if step >= seg.start_step:
                idx = k
        return idx


@dataclass(frozen=True)
class ControlProblem:
    """Plant and constraint sets in deviation coordinates about ``x_op, u_op``."""

    sys: LinearStochasticSystem
    U: Polytope
    X: Polytope
    x_op: np.ndarray | None = None
    u_op: np.ndarray | None = None
    state_names: tuple = ()
    input_names: tuple = ()

    @property
    def u_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box bounds of U in absolute units (inputs must be box-constrained)."""
        bb = self.U.box_bounds()
        if bb is None:
            raise ValueError("input set is not a box")
        lo, hi = bb
        off = np.zeros(self.sys.n_u) if self.u_op is None else self.u_op
        return lo + off, hi + off

    def absolute_u(self, u_dev) -> np.ndarray:
        return np.asarray(u_dev) + (0.0 if self.u_op is None else self.u_op)

    def absolute_x(self, x_dev) -> np.ndarray:
        return np.asarray(x_dev) + (0.0 if self.x_op is None else self.x_op)


def steady_state_target(
    sys: LinearStochasticSystem, tracked: list[int], values, U: Polytope | None = None, reg: float = 1e-9,
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares steady state hitting ``x[tracked] ~ values``.

    Solves ``min ||C x_ss - y||^2 + reg ||u_ss||^2`` with
    ``x_ss = (I - A)^{-1} B u_ss``.  Raises if ``u_ss`` is not strictly
    inside ``U``.
    """
    n = sys.n_x
    gain = np.linalg.solve(np.eye(n) - sys.A, sys.B)
    C = np.eye(n)[list(tracked)]
    K = C @ gain
    y = np.asarray(values, dtype=float)
    lhs = K.T @ K + reg * np.eye(sys.n_u)
    u_ss = np.linalg.solve(lhs, K.T @ y)
    x_ss = gain @ u_ss
    if U is not None and not U.interior_margin(u_ss) > 0.0:
        raise ValueError(
            f"setpoint rejected: steady-state input {u_ss} is not interior to the input set "
            f"(margin {U.interior_margin(u_ss):.3e})"
        )
    return x_ss, u_ss


def check_steady_state(sys, x_ss, u_ss, tol: float = 1e-8) -> float:
    res = float(np.max(np.abs(sys.A @ x_ss + sys.B @ u_ss - x_ss), initial=0.0))
    if res > tol * max(1.0, float(np.max(np.abs(x_ss), initial=0.0))):
        raise ValueError(f"setpoint pair violates x = A x + B u (residual {res:.3e})")
    return res


# ---------------------------------------------------------------------------
# controller


@dataclass
class StepResult:
    u: np.ndarray
    status: str
    slack_mean: float
    slack_var: float
    iterations: int
    solve_time: float
    objective: float
    degraded: bool
    v: np.ndarray | None = None
    M: np.ndarray | None = None


class Controller:
    """SMPC (``kind="smpc"``) or the nominal certainty-equivalent baseline.

    The nominal baseline solves the same program with ``M = 0``, zero
    moments, ``delta = 0`` and no variance rows; its mean rows stay soft.
    """

    def __init__(self, problem: ControlProblem, cfg: ControllerConfig, kind: str = "smpc", delta=None):
        if kind not in CONTROLLERS:
            raise ValueError(f"unknown controller {kind!r}; expected one of {CONTROLLERS}")
        self.problem = problem
        self.cfg = cfg
        self.kind = kind
        sys = problem.sys
        self.setpoints = cfg.setpoints or (SetpointSegment(0, np.zeros(sys.n_x), np.zeros(sys.n_u)),)
        for seg in self.setpoints:
            check_steady_state(sys, seg.x_ss, seg.u_ss)
            if not problem.U.interior_margin(seg.u_ss) > 0:
                raise ValueError("setpoint input is not interior to the input set")
        if delta is None:
            delta = cfg.chance.delta
        self.delta = np.asarray(delta, dtype=float)
        self._builders: dict[int, SocpBuilder] = {}
        self._sessions: dict[int, SolverSession] = {}
        self._moments = None
        self.u_prev = self.setpoints[0].u_ss.copy()
        self.degraded_steps = 0

    # -- program construction
    def moments(self):
        sys = self.problem.sys
        if self.kind == "nominal":
            return zero_moments(sys.n_x, sys.n_w, self.cfg.N)
        if self._moments is None:
            self._moments = saturation_moments(self.cfg.saturation, sys, self.cfg.N, method=self.cfg.moment_method)
        return self._moments

    def tightened(self, ops) -> list[TightenedStateConstraint]:
        if self.kind == "nominal":
            return [
                TightenedStateConstraint(i, j, row, float(ops.kx[j]), 0.0, float(ops.kx[j]))
                for i, j, row in ops.state_rows()
            ]
        spec = ChanceSpec(self.cfg.chance.alpha, self.delta)
        return cantelli_tighten(spec, ops)

    def builder(self, seg_idx: int, soft: bool = True) -> SocpBuilder:
        key = seg_idx if soft else -1 - seg_idx
        if key not in self._builders:
            seg = self.setpoints[seg_idx]
            sys = self.problem.sys
            U = self.problem.U.shifted(seg.u_ss)
            X = self.problem.X.shifted(seg.x_ss)
            ops = build_horizon_operators(sys, U, X, self.cfg.weights, self.cfg.N)
            W = saturated_support(self.cfg.saturation, self.cfg.N, sys.n_x)
            self._builders[key] = SocpBuilder(
                ops, self.moments(), sys.Sigma_w, self.tightened(ops), self.cfg.weights, W,
                feedback=self.kind == "smpc", soft=soft, variance_rows=self.kind == "smpc",
            )
        return self._builders[key]

    def session(self, key: int) -> SolverSession:
        if key not in self._sessions:
            self._sessions[key] = SolverSession(self.cfg.solver)
        return self._sessions[key]

    # -- one step
    def solve_at(self, x, step: int = 0, soft: bool = True):
        seg_idx = self.cfg.segment_index(step) if self.cfg.setpoints else 0
        seg = self.setpoints[seg_idx]
        bld = self.builder(seg_idx, soft)
        prog = bld.program(np.asarray(x, dtype=float) - seg.x_ss)
        sol = self.session(seg_idx if soft else -1 - seg_idx).solve(prog)
        return sol, bld, seg

    def control_step(self, x, step: int = 0) -> StepResult:
        sol, bld, seg = self.solve_at(x, step)
        lay = bld.layout
        lo, hi = self.problem.U.box_bounds() or (None, None)
        if sol.status == "optimal":
            v = lay.v_from(sol.x)
            u = seg.u_ss + v[: self.problem.sys.n_u]
            degraded = False
            eps_m = float(np.sum(sol.x[lay.eps_mean]))
            eps_v = float(np.sum(sol.x[lay.eps_var]))
            M = lay.M_from(sol.x)
        else:
            log.warning("solver returned %s at step %d; holding previous input", sol.status, step)
            u = self.u_prev.copy()
            v, M = None, None
            degraded = True
            self.degraded_steps += 1
            eps_m = eps_v = float("nan")
        u = self.clip(u)
        self.u_prev = u.copy()
        return StepResult(u, sol.status, eps_m, eps_v, sol.iterations, sol.solve_time, sol.objective, degraded, v, M)

    def clip(self, u_dev) -> np.ndarray:
        """Project into U exactly, working in absolute units so that the
        applied input satisfies the absolute bounds with no rounding slack."""
        bb = self.problem.U.box_bounds()
        if bb is None:
            if not self.problem.U.contains(u_dev, tol=1e-7):
                raise RuntimeError("optimized input left the input polytope")
            return np.asarray(u_dev, dtype=float)
        lo_abs, hi_abs = self.problem.u_bounds
        u_abs = np.clip(self.problem.absolute_u(u_dev), lo_abs, hi_abs)
        return u_abs - (0.0 if self.problem.u_op is None else self.problem.u_op)

    def applied_absolute(self, u_dev) -> np.ndarray:
        """Absolute input actually applied for a clipped deviation input."""
        lo_abs, hi_abs = self.problem.u_bounds
        return np.clip(self.problem.absolute_u(u_dev), lo_abs, hi_abs)


def nominal_mpc_step(x, problem: ControlProblem, cfg: ControllerConfig, step: int = 0) -> np.ndarray:
    return Controller(problem, cfg, kind="nominal").control_step(x, step).u


# ---------------------------------------------------------------------------
# simulation


@dataclass
class ClosedLoopTrace:
    x: np.ndarray          # (T+1, n_x) deviation states
    u: np.ndarray          # (T, n_u) deviation inputs used in the recursion
    u_abs: np.ndarray      # (T, n_u) applied absolute inputs
    w: np.ndarray          # (T, n_w)
    slack_mean: np.ndarray
    slack_var: np.ndarray
    status: list
    iterations: np.ndarray
    solve_time: np.ndarray
    lyapunov: np.ndarray   # (T+1,) (x - x_ss)' P (x - x_ss)
    seed: tuple
    degraded: int = 0

    @property
    def steps(self) -> int:
        return self.u.shape[0]

    def replay(self, sys: LinearStochasticSystem) -> np.ndarray:
        x = np.empty_like(self.x)
        x[0] = self.x[0]
        for t in range(self.steps):
            x[t + 1] = sys.step(self.x[t], self.u[t], self.w[t])
        return x


def run_rng(base_seed: int, run_index: int) -> np.random.Generator:
    """Counter-based stream per run: Philox keyed by (base seed, run index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(base_seed), int(run_index)])))


def closed_loop_simulate(
    problem: ControlProblem,
    cfg: ControllerConfig,
    x0,
    steps: int,
    seed=(0, 0),
    kind: str = "smpc",
    noise: bool = True,
    controller: Controller | None = None,
    P: np.ndarray | None = None,
) -> ClosedLoopTrace:
    sys = problem.sys
    ctrl = controller or Controller(problem, cfg, kind)
    seed = (seed, 0) if np.isscalar(seed) else tuple(seed)
    rng = run_rng(*seed)
    if P is None:
        P = discrete_lyapunov(sys.A)
    n_x, n_u, n_w = sys.n_x, sys.n_u, sys.n_w
    x = np.zeros((steps + 1, n_x))
    u = np.zeros((steps, n_u))
    u_abs = np.zeros((steps, n_u))
    w = sys.disturbance.sample(rng, steps) if noise else np.zeros((steps, n_w))
    sm = np.zeros(steps)
    sv = np.zeros(steps)
    its = np.zeros(steps, dtype=int)
    times = np.zeros(steps)
    status = []
    lyap = np.zeros(steps + 1)
    x[0] = np.asarray(x0, dtype=float)
    for t in range(steps):
        seg = ctrl.setpoints[cfg.segment_index(t) if cfg.setpoints else 0]
        e = x[t] - seg.x_ss
        lyap[t] = e @ P @ e
        res = ctrl.control_step(x[t], t)
        u[t] = res.u
        u_abs[t] = ctrl.applied_absolute(res.u) if problem.U.box_bounds() is not None else problem.absolute_u(res.u)
        sm[t], sv[t] = res.slack_mean, res.slack_var
        its[t] = res.iterations
        times[t] = res.solve_time
        status.append(res.status)
        x[t + 1] = sys.step(x[t], u[t], w[t])
    seg = ctrl.setpoints[cfg.segment_index(steps) if cfg.setpoints else 0]
    e = x[steps] - seg.x_ss
    lyap[steps] = e @ P @ e
    return ClosedLoopTrace(x, u, u_abs, w, sm, sv, status, its, times, lyap, seed, ctrl.degraded_steps)


@dataclass
class EnsembleResult:
    traces: list
    mean: np.ndarray
    var: np.ndarray
    violation_freq: np.ndarray      # (T, r) per step, per state-constraint row
    run_violations: np.ndarray      # (runs,) bool
    violation_steps: np.ndarray     # (runs,) count of steps with any violation
    snapshots: dict
    degraded: int
    kind: str
    base_seed: int

    @property
    def runs(self) -> int:
        return len(self.traces)

    @property
    def fraction_violating(self) -> float:
        return float(np.mean(self.run_violations)) if self.runs else 0.0


def _one_run(args):
    problem, cfg, x0, steps, base_seed, idx, kind, noise = args
    return closed_loop_simulate(problem, cfg, x0, steps, (base_seed, idx), kind=kind, noise=noise)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def monte_carlo(
    problem: ControlProblem,
    cfg: ControllerConfig,
    x0,
    steps: int,
    runs: int,
    base_seed: int = 0,
    kind: str = "smpc",
    snapshot_steps=(),
    noise: bool = True,
    workers: int | None = None,
) -> EnsembleResult:
    workers = worker_count() if workers is None else workers
    jobs = [(problem, cfg, x0, steps, base_seed, i, kind, noise) for i in range(runs)]
    if workers > 1 and runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_one_run, jobs))
    else:
        traces = [_one_run(j) for j in jobs]
    return summarize(traces, problem, kind, base_seed, snapshot_steps)


def summarize(traces, problem: ControlProblem, kind: str, base_seed: int, snapshot_steps=()) -> EnsembleResult:
    X = np.stack([tr.x for tr in traces])           # (runs, T+1, n_x)
    H, k = problem.X.H, problem.X.k
    lhs = np.einsum("rj,btj->btr", H, X[:, 1:, :])  # rows evaluated on x_1..x_T
    viol = lhs > k                                   # (runs, T, r)
    snaps = {int(s): X[:, int(s), :].copy() for s in snapshot_steps if 0 <= int(s) < X.shape[1]}
    return EnsembleResult(
        traces=list(traces),
        mean=X.mean(axis=0),
        var=X.var(axis=0),
        violation_freq=viol.mean(axis=0),
        run_violations=viol.any(axis=(1, 2)),
        violation_steps=viol.any(axis=2).sum(axis=1),
        snapshots=snaps,
        degraded=int(sum(tr.degraded for tr in traces)),
        kind=kind,
        base_seed=base_seed,
    )


# ---------------------------------------------------------------------------
# penalty calibration


@dataclass
class CalibrationRow:
    rho: float
    max_slack: float
    max_deviation: float
    probes_used: int
    qualified: bool


@dataclass
class CalibrationReport:
    rows: list
    rho_star: float | None
    plateau_deviation: float | None
    hard_feasible: int
    diagnostics: str = ""

    @property
    def ok(self) -> bool:
        return self.rho_star is not None


def calibrate_rho(
    problem: ControlProblem,
    cfg: ControllerConfig,
    probes,
    grid,
    slack_tol: float = 1e-7,
    match_tol: float = 1e-6,
    step: int = 0,
) -> CalibrationReport:
    """Smallest grid ``rho`` for which soft and hard solutions coincide.

    Probes whose hard-constrained program (slacks removed) is not solvable
    are skipped, as the exact-penalty property says nothing about them.
    """
    grid = sorted(float(g) for g in grid)
    hard_ctrl = Controller(problem, cfg, "smpc")
    hard = []
    for x in probes:
        sol, bld, _ = hard_ctrl.solve_at(x, step, soft=False)
        if sol.status == "optimal":
            hard.append((np.asarray(x, dtype=float), bld.layout.v_from(sol.x), bld.layout.m_from_M(bld.layout.M_from(sol.x))))
    rows = []
    rho_star = None
    for rho in grid:
        ctrl = Controller(problem, cfg.with_rho(rho), "smpc")
        max_slack = 0.0
        max_dev = 0.0
        for x, v_h, m_h in hard:
            sol, bld, _ = ctrl.solve_at(x, step)
            if sol.status != "optimal":
                max_slack = max_dev = np.inf
                break
            lay = bld.layout
            max_slack = max(max_slack, float(np.max(lay.slacks_from(sol.x), initial=0.0)))
            dev = max(float(np.max(np.abs(lay.v_from(sol.x) - v_h), initial=0.0)),
                      float(np.max(np.abs(sol.x[lay.m] - m_h), initial=0.0)))
            max_dev = max(max_dev, dev)
        ok = bool(hard) and max_slack <= slack_tol and max_dev <= match_tol
        rows.append(CalibrationRow(rho, max_slack, max_dev, len(hard), ok))
        if ok and rho_star is None:
            rho_star = rho
    plateau = None
    diag = ""
    if rho_star is not None:
        # exactness plateau: doubling rho leaves the solution unchanged
        c1 = Controller(problem, cfg.with_rho(rho_star), "smpc")
        c2 = Controller(problem, cfg.with_rho(2.0 * rho_star), "smpc")
        plateau = 0.0
        for x, _, _ in hard:
            s1, b1, _ = c1.solve_at(x, step)
            s2, b2, _ = c2.solve_at(x, step)
            plateau = max(plateau, float(np.max(np.abs(b1.layout.v_from(s1.x) - b2.layout.v_from(s2.x)))))
    else:
        diag = (
            f"no grid value qualified; largest tested rho={grid[-1]:g} "
            f"(max slack {rows[-1].max_slack:.3e}, max deviation {rows[-1].max_deviation:.3e})"
            if rows else "empty grid"
        )
    return CalibrationReport(rows, rho_star, plateau, len(hard), diag)


# ---------------------------------------------------------------------------
# drift / stability


@dataclass
class DriftReport:
    ensemble_mean: np.ndarray
    max_mean: float
    ceiling: np.ndarray | None
    max_ceiling_margin: float | None
    lam: float | None
    b: float | None
    theta: float | None
    radius: float | None
    constants: dict
    drift_mean: float | None
    drift_stderr: float | None
    drift_samples: int
    passed: bool
    message: str = ""

    def as_dict(self) -> dict:
        return {
            "max_ensemble_mean": self.max_mean,
            "ceiling_margin": self.max_ceiling_margin,
            "lambda": self.lam,
            "b": self.b,
            "theta": self.theta,
            "radius": self.radius,
            "constants": self.constants,
            "drift_mean": self.drift_mean,
            "drift_stderr": self.drift_stderr,
            "drift_samples": self.drift_samples,
            "passed": self.passed,
            "message": self.message,
        }


def drift_constants(sys: LinearStochasticSystem, U: Polytope, P: np.ndarray, grid: int = 2000) -> dict:
    """Constants of the geometric drift bound.

    ``U_b`` bounds ``||u||_1`` over U, ``c1 = ||B'PA||_inf U_b``,
    ``c2 = ||B'PB||_inf U_b^2 + tr(G'PG Sigma_w)``.  For ``theta`` in
    ``(1 - lambda_max(P), 1)`` the drift ``E V(x+) <= lambda V(x)`` holds
    outside ``D = {||x||_inf <= r(theta)}`` with
    ``lambda = 1 - (1 - theta) / lambda_max(P)``; inside D,
    ``E V(x+) <= b = lambda_max(A'PA) n r^2 + 2 c1 r + c2``.  theta is
    picked on a grid to minimise ``b / (1 - lambda)``.
    """
    A, B, G = sys.A, sys.B, sys.G
    Ub = _one_norm_radius(U)
    c1 = np.linalg.norm(B.T @ P @ A, np.inf) * Ub
    c2 = np.linalg.norm(B.T @ P @ B, np.inf) * Ub ** 2 + float(np.trace(G.T @ P @ G @ sys.Sigma_w))
    lmax = float(np.max(np.linalg.eigvalsh(P)))
    lmax_apa = float(np.max(np.linalg.eigvalsh(A.T @ P @ A)))
    n = sys.n_x
    lo = max(1.0 - lmax, 0.0)
    best = None
    for theta in np.linspace(lo, 1.0, grid + 2)[1:-1]:
        r = (c1 + np.sqrt(c1 * c1 + c2 * theta)) / theta
        lam = 1.0 - (1.0 - theta) / lmax
        if not 0.0 <= lam < 1.0:
            continue
        b = lmax_apa * n * r * r + 2.0 * c1 * r + c2
        score = b / (1.0 - lam)
        if best is None or score < best["score"]:
            best = dict(theta=float(theta), r=float(r), lam=float(lam), b=float(b), score=float(score))
    out = dict(U_b=float(Ub), c1=float(c1), c2=float(c2), lambda_max_P=lmax)
    if best is not None:
        out.update(best)
    return out


def _one_norm_radius(U: Polytope) -> float:
    """``max ||u||_1`` over U (vertex maximum of a convex function)."""
    bb = U.box_bounds()
    if bb is not None:
        lo, hi = bb
        return float(np.sum(np.maximum(np.abs(lo), np.abs(hi))))
    from scipy.optimize import linprog

    n = U.dim
    best = 0.0
    for signs in np.array(np.meshgrid(*[[-1.0, 1.0]] * n)).reshape(n, -1).T:
        res = linprog(-signs, A_ub=U.H, b_ub=U.k, bounds=[(None, None)] * n, method="highs")
        if res.status != 0:
            raise ValueError("input set is unbounded")
        best = max(best, float(-res.fun))
    return best


def drift_check(traces, sys: LinearStochasticSystem, U: Polytope, P: np.ndarray | None = None) -> DriftReport:
    """Ensemble boundedness of ``V = x'Px`` against the drift ceiling."""
    if P is None:
        P = discrete_lyapunov(sys.A)
    V = np.stack([tr.lyapunov for tr in traces])
    mean = V.mean(axis=0)
    consts = drift_constants(sys, U, P)
    if "lam" not in consts:
        return DriftReport(
            mean, float(mean.max()), None, None, None, None, None, None, consts, None, None, 0,
            bool(np.all(np.isfinite(mean))),
            "no admissible theta found; only the empirical boundedness check was run",
        )
    lam, b, r = consts["lam"], consts["b"], consts["r"]
    t = np.arange(V.shape[1])
    ceiling = lam ** t * mean[0] + b / (1.0 - lam)
    margin = float(np.max(mean - ceiling))
    # empirical drift outside D = {||x||_inf <= r}: E[V(x+)] <= lam V(x)
    X = np.stack([tr.x for tr in traces])
    norms = np.max(np.abs(X[:, :-1, :]), axis=2)
    outside = norms > r
    d = (V[:, 1:] - lam * V[:, :-1])[outside]
    if d.size:
        dm = float(d.mean())
        se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
        drift_ok = dm <= 3.0 * se
    else:
        dm = se = None
        drift_ok = True
    passed = bool(margin <= 0.0 and drift_ok and np.all(np.isfinite(mean)))
    return DriftReport(mean, float(mean.max()), ceiling, margin, lam, b, consts["theta"], r, consts,
                       dm, se, int(d.size), passed)
