"""Run configuration: YAML ingestion with line-referenced errors.

Every mapping is checked against a fixed key set; unknown keys, wrong types
and out-of-range values are reported as ``path:line: message``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .chance import ChanceSpec, decompose_jcc, default_delta
from .controller import ControlProblem, ControllerConfig, SetpointSegment, steady_state_target
from .matrixfile import MatrixFileError, bundled_path, load_bundled, load_matrix_file
from .model import FAMILIES, DisturbanceModel, LinearStochasticSystem, Polytope, WeightSpec
from .saturation import KINDS, METHODS, SaturationPolicy
from .solver import BACKENDS, SolverSettings


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# YAML with line numbers


class _Node:
    """A loaded value together with the line it came from (1-based)."""

    __slots__ = ("value", "line")

    def __init__(self, value, line):
        self.value = value
        self.line = line


class _LineLoader(yaml.SafeLoader):
    pass


# accept exponents without a sign or dot ("1e4", "1.0e-8"), as YAML 1.2 does
_LineLoader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def _construct(loader, node):
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for knode, vnode in node.value:
            key = loader.construct_object(knode, deep=True)
            if key in out:
                raise ConfigError(f"line {knode.start_mark.line + 1}: duplicate key {key!r}")
            out[key] = _construct(loader, vnode)
        return _Node(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Node([_construct(loader, v) for v in node.value], line)
    return _Node(loader.construct_object(node, deep=True), line)


def _load_nodes(text: str, source: str) -> _Node:
    loader = _LineLoader(text)
    try:
        root = loader.get_single_node()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    finally:
        loader.dispose()
    if root is None:
        raise ConfigError(f"{source}:1: empty configuration")
    try:
        return _construct(_LineLoader(""), root)
    except ConfigError as exc:
        raise ConfigError(f"{source}:{str(exc)[5:]}") from None


class _Reader:
    def __init__(self, source: str):
        self.source = source

    def fail(self, node: _Node | None, msg: str):
        line = node.line if node is not None else 1
        raise ConfigError(f"{self.source}:{line}: {msg}")

    def mapping(self, node: _Node, allowed: set, where: str, required=()) -> dict:
        if not isinstance(node.value, dict):
            self.fail(node, f"{where} must be a mapping")
        for key, val in node.value.items():
            if key not in allowed:
                self.fail(val, f"unknown key {key!r} in {where}; allowed: {sorted(allowed)}")
        for key in required:
            if key not in node.value:
                self.fail(node, f"missing required key {key!r} in {where}")
        return node.value

    def number(self, node: _Node, name: str, lo=None, hi=None, lo_open=False, hi_open=False) -> float:
        v = node.value
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(node, f"{name} must be a number, got {v!r}")
        v = float(v)
        if not np.isfinite(v):
            self.fail(node, f"{name} must be finite")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            self.fail(node, f"{name}={v} below allowed range ({'>' if lo_open else '>='} {lo})")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            self.fail(node, f"{name}={v} above allowed range ({'<' if hi_open else '<='} {hi})")
        return v

    def integer(self, node: _Node, name: str, lo=None) -> int:
        v = node.value
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(node, f"{name} must be an integer, got {v!r}")
        if lo is not None and v < lo:
            self.fail(node, f"{name}={v} must be >= {lo}")
        return int(v)

    def string(self, node: _Node, name: str, choices=None) -> str:
        v = node.value
        if not isinstance(v, str):
            self.fail(node, f"{name} must be a string, got {v!r}")
        if choices is not None and v not in choices:
            self.fail(node, f"{name}={v!r} not one of {list(choices)}")
        return v

    def boolean(self, node: _Node, name: str) -> bool:
        if not isinstance(node.value, bool):
            self.fail(node, f"{name} must be true or false")
        return node.value

    def numbers(self, node: _Node, name: str, length=None, **kw) -> np.ndarray:
        if not isinstance(node.value, list):
            self.fail(node, f"{name} must be a list of numbers")
        vals = np.array([self.number(n, f"{name}[{i}]", **kw) for i, n in enumerate(node.value)])
        if length is not None and vals.size != length:
            self.fail(node, f"{name} has {vals.size} entries, expected {length}")
        return vals


# ---------------------------------------------------------------------------
# resolved configuration


@dataclass
class ExperimentSpec:
    runs: int = 1
    steps: int = 1
    seed: int = 0
    controller: str = "smpc"
    snapshot_steps: tuple = ()
    x0: np.ndarray | None = None


@dataclass
class RunConfig:
    problem: ControlProblem
    controller: ControllerConfig
    experiment: ExperimentSpec
    output_dir: Path
    tracked: tuple = ()
    tracked_names: tuple = ()
    setpoint_values: tuple = ()
    constrained: tuple = ()
    plots: bool = True
    source: str = ""
    raw: dict = field(default_factory=dict)

    @property
    def sampling_period_hr(self) -> float:
        return self.controller.sampling_period_min / 60.0


TOP_KEYS = {"system", "constraints", "controller", "setpoints", "experiment", "output"}


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: configuration file not found")
    return parse_config(path.read_text(), str(path), base_dir=path.parent)


def bundled_config(name: str) -> Path:
    p = bundled_path(f"{name}.yaml")
    if not p.is_file():
        raise ConfigError(f"no bundled configuration named {name!r}")
    return p


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> RunConfig:
    base_dir = Path(".") if base_dir is None else base_dir
    rd = _Reader(source)
    root = _load_nodes(text, source)
    top = rd.mapping(root, TOP_KEYS, "the top level", required=("system", "constraints", "controller"))

    # --- system
    sysm = rd.mapping(top["system"], {"case", "file", "disturbance"}, "system")
    family = "gaussian"
    if "disturbance" in sysm:
        family = rd.string(sysm["disturbance"], "system.disturbance", FAMILIES)
    if ("case" in sysm) == ("file" in sysm):
        rd.fail(top["system"], "system needs exactly one of 'case' or 'file'")
    try:
        if "case" in sysm:
            mf = load_bundled(rd.string(sysm["case"], "system.case"))
        else:
            fpath = base_dir / rd.string(sysm["file"], "system.file")
            if not fpath.is_file():
                rd.fail(sysm["file"], f"matrix file {fpath} does not exist")
            mf = load_matrix_file(fpath)
    except (FileNotFoundError, MatrixFileError) as exc:
        node = sysm.get("case") or sysm.get("file")
        rd.fail(node, str(exc))
    try:
        A, B, G = mf.matrix("A"), mf.matrix("B"), mf.matrix("G")
        Sw = mf.matrix("Sigma_w")
    except KeyError as exc:
        rd.fail(top["system"], f"system data lacks block {exc}")
    n_x, n_u = A.shape[0], B.shape[1]
    states = tuple(mf.labels.get("states", [f"x{i + 1}" for i in range(n_x)]))
    inputs = tuple(mf.labels.get("inputs", [f"u{i + 1}" for i in range(n_u)]))
    x_op = mf.vectors.get("x_nominal", np.zeros(n_x))
    u_op = mf.vectors.get("u_nominal", np.zeros(n_u))
    try:
        sys = LinearStochasticSystem(A, B, G, DisturbanceModel(Sw, family))
    except ValueError as exc:
        rd.fail(top["system"], f"invalid system: {exc}")

    # --- constraints (absolute units; converted to deviations about the op point)
    cons = rd.mapping(top["constraints"], {"inputs", "states"}, "constraints", required=("inputs", "states"))
    lo_u, hi_u = _box_rows(rd, cons["inputs"], inputs, "constraints.inputs", require_all=True)
    U = Polytope.box(lo_u - u_op, hi_u - u_op)
    X_rows = _state_rows(rd, cons["states"], states, x_op)
    X = Polytope(*X_rows[:2])
    constrained = X_rows[2]
    problem = ControlProblem(sys, U, X, np.asarray(x_op, float), np.asarray(u_op, float), states, inputs)

    # --- controller
    ctl = rd.mapping(
        top["controller"],
        {"horizon", "sampling_period_min", "Q_diag", "R_diag", "rho", "chance", "saturation", "solver"},
        "controller", required=("horizon", "Q_diag", "R_diag", "rho", "chance"),
    )
    N = rd.integer(ctl["horizon"], "controller.horizon", lo=1)
    Ts = rd.number(ctl["sampling_period_min"], "controller.sampling_period_min", lo=0.0, lo_open=True) if "sampling_period_min" in ctl else 1.0
    Q = np.diag(rd.numbers(ctl["Q_diag"], "controller.Q_diag", n_x, lo=0.0))
    R = np.diag(rd.numbers(ctl["R_diag"], "controller.R_diag", n_u, lo=0.0))
    rho = rd.number(ctl["rho"], "controller.rho", lo=0.0)
    weights = WeightSpec(Q, R, rho)

    chance = _chance(rd, ctl["chance"], X, n_x)
    sat = _saturation(rd, ctl.get("saturation"), sys)
    solver = _solver(rd, ctl.get("solver"))

    # --- setpoints
    segments, tracked, tracked_names, sp_values = (), (), (), ()
    steps_per_hr = 60.0 / Ts
    if "setpoints" in top:
        spm = rd.mapping(top["setpoints"], {"tracked", "schedule"}, "setpoints", required=("tracked", "schedule"))
        tn = spm["tracked"]
        if not isinstance(tn.value, list) or not tn.value:
            rd.fail(tn, "setpoints.tracked must be a non-empty list of state names")
        tracked_names = tuple(rd.string(n, "setpoints.tracked[]", choices=states) for n in tn.value)
        tracked = tuple(states.index(n) for n in tracked_names)
        sched = spm["schedule"]
        if not isinstance(sched.value, list) or not sched.value:
            rd.fail(sched, "setpoints.schedule must be a non-empty list")
        segs, vals_all = [], []
        prev = -1
        for i, item in enumerate(sched.value):
            it = rd.mapping(item, {"start_hr", "values"}, f"setpoints.schedule[{i}]", required=("start_hr", "values"))
            start = rd.number(it["start_hr"], "start_hr", lo=0.0)
            step = int(round(start * steps_per_hr))
            if abs(step - start * steps_per_hr) > 1e-9:
                rd.fail(it["start_hr"], "start_hr must fall on a sampling instant")
            if (i == 0 and step != 0) or step <= prev:
                rd.fail(it["start_hr"], "schedule must start at 0 and increase strictly")
            prev = step
            vals = rd.numbers(it["values"], "values", len(tracked))
            try:
                x_ss, u_ss = steady_state_target(sys, list(tracked), vals - x_op[list(tracked)], U)
            except ValueError as exc:
                rd.fail(item, str(exc))
            segs.append(SetpointSegment(step, x_ss, u_ss))
            vals_all.append(vals)
        segments = tuple(segs)
        sp_values = tuple((s.start_step, v) for s, v in zip(segs, vals_all))

    # delta default: fraction of slack at the initial operating point
    if chance["delta"] is None:
        x_ref = segments[0].x_ss if segments else np.zeros(n_x)
        try:
            delta = default_delta(X.k, X.H, x_ref, chance["fraction"])
        except ValueError as exc:
            rd.fail(top["controller"], str(exc))
    else:
        delta = chance["delta"]
    try:
        cspec = ChanceSpec(chance["alpha"], delta)
    except ValueError as exc:
        rd.fail(chance["node"], str(exc))

    ccfg = ControllerConfig(
        N=N, weights=weights, chance=cspec, saturation=sat["policy"], sampling_period_min=Ts,
        setpoints=segments, moment_method=sat["method"], solver=solver,
    )

    # --- experiment
    exp = ExperimentSpec()
    if "experiment" in top:
        em = rd.mapping(
            top["experiment"],
            {"runs", "duration_hr", "steps", "seed", "controller", "snapshot_times_hr", "x0"},
            "experiment",
        )
        if "runs" in em:
            exp.runs = rd.integer(em["runs"], "experiment.runs", lo=1)
        if "duration_hr" in em and "steps" in em:
            rd.fail(top["experiment"], "give either duration_hr or steps, not both")
        if "duration_hr" in em:
            dur = rd.number(em["duration_hr"], "experiment.duration_hr", lo=0.0, lo_open=True)
            exp.steps = int(round(dur * steps_per_hr))
        if "steps" in em:
            exp.steps = rd.integer(em["steps"], "experiment.steps", lo=1)
        if "seed" in em:
            exp.seed = rd.integer(em["seed"], "experiment.seed", lo=0)
        if "controller" in em:
            exp.controller = rd.string(em["controller"], "experiment.controller", ("smpc", "nominal"))
        if "snapshot_times_hr" in em:
            times = rd.numbers(em["snapshot_times_hr"], "experiment.snapshot_times_hr", lo=0.0)
            exp.snapshot_steps = tuple(int(round(t * steps_per_hr)) for t in times)
        if "x0" in em:
            node = em["x0"]
            if node.value == "setpoint":
                exp.x0 = None
            else:
                exp.x0 = rd.numbers(node, "experiment.x0", n_x) - x_op
    out_dir = Path("results")
    plots = True
    if "output" in top:
        om = rd.mapping(top["output"], {"directory", "plots"}, "output")
        if "directory" in om:
            out_dir = base_dir / rd.string(om["directory"], "output.directory")
        if "plots" in om:
            plots = rd.boolean(om["plots"], "output.plots")

    return RunConfig(
        problem=problem, controller=ccfg, experiment=exp, output_dir=out_dir,
        tracked=tracked, tracked_names=tracked_names, setpoint_values=sp_values,
        constrained=constrained, plots=plots, source=source,
    )


def _box_rows(rd: _Reader, node, names, where, require_all=False):
    if not isinstance(node.value, list) or not node.value:
        rd.fail(node, f"{where} must be a non-empty list")
    lo = np.full(len(names), -np.inf)
    hi = np.full(len(names), np.inf)
    seen = set()
    for i, item in enumerate(node.value):
        m = rd.mapping(item, {"name", "lower", "upper"}, f"{where}[{i}]", required=("name", "lower", "upper"))
        name = rd.string(m["name"], "name", choices=names)
        if name in seen:
            rd.fail(item, f"duplicate entry for {name!r}")
        seen.add(name)
        a = rd.number(m["lower"], "lower")
        b = rd.number(m["upper"], "upper")
        if not a < b:
            rd.fail(item, f"lower bound {a} must be below upper bound {b}")
        k = names.index(name)
        lo[k], hi[k] = a, b
    if require_all and len(seen) != len(names):
        rd.fail(node, f"{where} must bound every input (missing {sorted(set(names) - seen)})")
    return lo, hi


def _state_rows(rd: _Reader, node, names, x_op):
    """Rows ordered as [upper bounds..., lower bounds...] in deviation units."""
    lo, hi = _box_rows(rd, node, names, "constraints.states")
    idx = [i for i in range(len(names)) if np.isfinite(lo[i]) or np.isfinite(hi[i])]
    H, k = [], []
    for i in idx:
        e = np.zeros(len(names))
        e[i] = 1.0
        H.append(e)
        k.append(hi[i] - x_op[i])
    for i in idx:
        e = np.zeros(len(names))
        e[i] = -1.0
        H.append(e)
        k.append(-(lo[i] - x_op[i]))
    for i in idx:
        if not (lo[i] < x_op[i] < hi[i]):
            rd.fail(node, f"operating point of {names[i]} is not inside its bounds")
    return np.array(H), np.array(k), tuple(idx)


def _chance(rd: _Reader, node, X: Polytope, n_x):
    m = rd.mapping(node, {"alpha", "beta", "allocation", "delta", "delta_fraction"}, "controller.chance")
    r = X.rows
    alloc = rd.string(m["allocation"], "allocation", ("uniform", "explicit")) if "allocation" in m else None
    beta = rd.number(m["beta"], "beta", lo=0.0, hi=1.0, hi_open=True) if "beta" in m else None
    alpha = None
    if "alpha" in m:
        if isinstance(m["alpha"].value, list):
            alpha = rd.numbers(m["alpha"], "alpha", r, lo=0.0, hi=1.0, hi_open=True)
        else:
            alpha = np.full(r, rd.number(m["alpha"], "alpha", lo=0.0, hi=1.0, hi_open=True))
    try:
        if alloc == "uniform" or (alpha is None and beta is not None):
            if beta is None:
                rd.fail(node, "uniform allocation needs beta")
            if alpha is not None:
                rd.fail(m["alpha"], "give alpha only with allocation: explicit")
            alpha = decompose_jcc(beta, r, "uniform")
        elif alpha is not None:
            if beta is not None:
                alpha = decompose_jcc(beta, r, alpha)
        else:
            rd.fail(node, "controller.chance needs alpha or beta")
    except ValueError as exc:
        rd.fail(m.get("alpha", node), str(exc))
    delta = None
    if "delta" in m and m["delta"].value != "auto":
        delta = rd.numbers(m["delta"], "delta", r, lo=0.0, lo_open=True)
    frac = rd.number(m["delta_fraction"], "delta_fraction", lo=0.0, hi=1.0, lo_open=True, hi_open=True) if "delta_fraction" in m else 0.25
    return {"alpha": alpha, "delta": delta, "fraction": frac, "node": node}


def _saturation(rd: _Reader, node, sys):
    kind, phi_max, sigmas, method, scale = "hard_clip", None, 3.0, None, None
    if node is not None:
        m = rd.mapping(node, {"kind", "phi_max", "phi_max_sigmas", "scale", "moment_method"}, "controller.saturation")
        if "kind" in m:
            kind = rd.string(m["kind"], "kind", KINDS)
        if "phi_max" in m and m["phi_max"].value != "auto":
            phi_max = rd.number(m["phi_max"], "phi_max", lo=0.0, lo_open=True)
        if "phi_max_sigmas" in m:
            sigmas = rd.number(m["phi_max_sigmas"], "phi_max_sigmas", lo=0.0, lo_open=True)
        if "scale" in m:
            scale = rd.number(m["scale"], "scale", lo=0.0, lo_open=True)
        if "moment_method" in m:
            method = rd.string(m["moment_method"], "moment_method", METHODS)
    if phi_max is None:
        cov = sys.G @ sys.Sigma_w @ sys.G.T
        phi_max = sigmas * float(np.sqrt(np.max(np.diag(cov))))
    if method is None:
        cov = sys.G @ sys.Sigma_w @ sys.G.T
        diag_only = np.allclose(cov, np.diag(np.diag(cov)), atol=0.0)
        gaussian = sys.disturbance.family == "gaussian"
        method = "analytic" if kind == "hard_clip" and diag_only and gaussian else "quasi_random"
    return {"policy": SaturationPolicy(kind, phi_max, scale), "method": method}


def _solver(rd: _Reader, node) -> SolverSettings:
    if node is None:
        return SolverSettings()
    m = rd.mapping(node, {"backend", "tol", "max_iter", "scaling"}, "controller.solver")
    kw = {}
    if "backend" in m:
        kw["backend"] = rd.string(m["backend"], "backend", BACKENDS)
    if "tol" in m:
        kw["tol"] = rd.number(m["tol"], "tol", lo=0.0, lo_open=True)
    if "max_iter" in m:
        kw["max_iter"] = rd.integer(m["max_iter"], "max_iter", lo=1)
    if "scaling" in m:
        kw["scaling"] = rd.boolean(m["scaling"], "scaling")
    return SolverSettings(**kw)
