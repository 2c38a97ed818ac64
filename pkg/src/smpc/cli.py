"""Command-line front end.

::

    smpc simulate      --config abe [--runs R] [--seed S] [--controller smpc|nominal]
                       [--out DIR] [--snapshot-times 2.5,7.5]
    smpc calibrate     --config toy [--grid 1,10,100] [--probes 20] [--write-config PATH]
    smpc verify        --config abe [--out report.json]
    smpc export-socp   --config abe --out program.txt [--state x1,..] [--step K]

``--config`` takes a path or the name of a bundled configuration.  Every
output of ``simulate`` is a deterministic function of the configuration and
the seed; wall-clock solve times go to ``timing.txt`` only.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
import scipy.linalg as sl

from . import __version__
from .config import ConfigError, RunConfig, bundled_config, load_config
from .controller import (
    Controller,
    EnsembleResult,
    calibrate_rho,
    drift_check,
    monte_carlo,
    run_rng,
)
from .matrixfile import bundled_path
from .model import discrete_lyapunov, validate_system
from .socp import write_conic

log = logging.getLogger("smpc")

CSV_VERSION = 1
SUMMARY_VERSION = 1
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def resolve_config(arg: str) -> RunConfig:
    path = Path(arg)
    if path.is_file():
        return load_config(path)
    if path.suffix or "/" in arg:
        raise ConfigError(f"{arg}: configuration file not found")
    return load_config(bundled_config(arg))


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{name} must be a comma-separated list of numbers") from None


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    rc = resolve_config(args.config)
    exp = rc.experiment
    runs = args.runs if args.runs is not None else exp.runs
    seed = args.seed if args.seed is not None else exp.seed
    kind = args.controller or exp.controller
    steps_per_hr = 60.0 / rc.controller.sampling_period_min
    if args.snapshot_times is not None:
        snaps = tuple(int(round(t * steps_per_hr)) for t in _floats(args.snapshot_times, "--snapshot-times"))
    else:
        snaps = exp.snapshot_steps
    out = Path(args.out) if args.out else rc.output_dir
    x0 = _initial_state(rc)
    log.info("simulating %d run(s) of %d steps with the %s controller", runs, exp.steps, kind)
    ens = monte_carlo(rc.problem, rc.controller, x0, exp.steps, runs, base_seed=seed, kind=kind, snapshot_steps=snaps)
    write_outputs(rc, ens, out, seed, plots=rc.plots and not args.no_plots)
    summary = json.loads((out / "summary.json").read_text())
    print(f"runs: {runs}  controller: {kind}  runs with state violations: {summary['violations']['runs_violating']}"
          f"  input bound violations: {summary['inputs']['bound_violations']}  degraded steps: {summary['degraded_steps']}")
    print(f"outputs written to {out}")
    return EXIT_OK


def _initial_state(rc: RunConfig) -> np.ndarray:
    if rc.experiment.x0 is not None:
        return rc.experiment.x0
    segs = rc.controller.setpoints
    return segs[0].x_ss.copy() if segs else np.zeros(rc.problem.sys.n_x)


def trace_csv(rc: RunConfig, tr) -> str:
    p = rc.problem
    dt = rc.sampling_period_hr
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "time_hr"] + [f"x:{n}" for n in p.state_names] + [f"u:{n}" for n in p.input_names]
               + ["slack_mean", "slack_var", "status", "solver_iterations"])
    X = p.absolute_x(tr.x)
    for t in range(tr.x.shape[0]):
        row = [t, repr(t * dt)] + [repr(float(v)) for v in X[t]]
        if t < tr.steps:
            row += [repr(float(v)) for v in tr.u_abs[t]]
            row += [repr(float(tr.slack_mean[t])), repr(float(tr.slack_var[t])), tr.status[t], int(tr.iterations[t])]
        else:
            row += [""] * (p.sys.n_u + 4)
        w.writerow(row)
    return buf.getvalue()


def build_summary(rc: RunConfig, ens: EnsembleResult, seed: int) -> dict:
    p = rc.problem
    sys = p.sys
    names = list(p.state_names)
    lo_u, hi_u = p.u_bounds
    U_abs = np.concatenate([tr.u_abs for tr in ens.traces])
    bad_u = int(np.sum(np.any((U_abs < lo_u) | (U_abs > hi_u), axis=1)))
    mean_abs = p.absolute_x(ens.mean)
    steps = ens.traces[0].steps
    dt = rc.sampling_period_hr

    row_desc = []
    H, k = p.X.H, p.X.k
    for j in range(p.X.rows):
        i = int(np.flatnonzero(H[j])[0])
        sign = H[j, i]
        bound = (k[j] / sign) + p.x_op[i] if p.x_op is not None else k[j] / sign
        row_desc.append({
            "state": names[i],
            "side": "upper" if sign > 0 else "lower",
            "bound": float(bound),
            "violating_steps": int(round(float(np.sum(ens.violation_freq[:, j])) * ens.runs)),
            "max_step_frequency": float(ens.violation_freq[:, j].max(initial=0.0)),
        })

    tracked = []
    final = mean_abs[-1]
    for idx, name in zip(rc.tracked, rc.tracked_names):
        target = float(rc.setpoint_values[-1][1][list(rc.tracked).index(idx)]) if rc.setpoint_values else 0.0
        tracked.append({
            "state": name,
            "setpoint": target,
            "final_mean": float(final[idx]),
            "relative_offset": float((final[idx] - target) / target) if target else None,
        })

    series_idx = sorted(set(rc.tracked) | set(rc.constrained))
    series = {
        names[i]: {"mean": [float(v) for v in mean_abs[:, i]], "variance": [float(v) for v in ens.var[:, i]]}
        for i in series_idx
    }
    snaps = []
    for step, X in sorted(ens.snapshots.items()):
        Xa = p.absolute_x(X)
        snaps.append({
            "step": int(step),
            "time_hr": float(step * dt),
            "states": {
                names[i]: {
                    "mean": float(Xa[:, i].mean()),
                    "std": float(Xa[:, i].std()),
                    "min": float(Xa[:, i].min()),
                    "max": float(Xa[:, i].max()),
                }
                for i in rc.constrained
            },
        })

    try:
        P = discrete_lyapunov(sys.A)
        drift = drift_check(ens.traces, sys, p.U, P).as_dict()
    except ValueError as exc:
        drift = {"passed": False, "message": str(exc)}
    drift = _jsonable(drift)

    return {
        "schema_version": SUMMARY_VERSION,
        "package_version": __version__,
        "config": rc.source,
        "controller": ens.kind,
        "seed": int(seed),
        "runs": ens.runs,
        "steps": int(steps),
        "sampling_period_min": float(rc.controller.sampling_period_min),
        "rho": float(rc.controller.weights.rho),
        "violations": {
            "runs_violating": int(np.sum(ens.run_violations)),
            "fraction_runs_violating": float(ens.fraction_violating),
            "violating_runs": [int(i) for i in np.flatnonzero(ens.run_violations)],
            "rows": row_desc,
        },
        "inputs": {
            "names": list(p.input_names),
            "lower": [float(v) for v in lo_u],
            "upper": [float(v) for v in hi_u],
            "applied_min": [float(v) for v in U_abs.min(axis=0)],
            "applied_max": [float(v) for v in U_abs.max(axis=0)],
            "bound_violations": bad_u,
        },
        "degraded_steps": int(ens.degraded),
        "solver_iterations": {
            "mean": float(np.mean([tr.iterations.mean() for tr in ens.traces])),
            "max": int(max(tr.iterations.max() for tr in ens.traces)),
        },
        "tracking": tracked,
        "series": series,
        "snapshots": snaps,
        "drift": drift,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def summary_schema() -> dict:
    return json.loads(bundled_path("summary.schema.json").read_text())


def write_outputs(rc: RunConfig, ens: EnsembleResult, out: Path, seed: int, plots: bool = True) -> None:
    import jsonschema

    out.mkdir(parents=True, exist_ok=True)
    tdir = out / "traces"
    tdir.mkdir(exist_ok=True)
    for idx, tr in enumerate(ens.traces):
        (tdir / f"run_{idx:03d}.csv").write_text(trace_csv(rc, tr))
    summary = build_summary(rc, ens, seed)
    jsonschema.validate(summary, summary_schema())
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    with open(out / "timing.txt", "w") as fh:
        fh.write("# wall-clock solve time per run (not deterministic)\n")
        for idx, tr in enumerate(ens.traces):
            fh.write(f"run {idx}: total {tr.solve_time.sum():.3f} s, max step {tr.solve_time.max():.4f} s\n")
    if plots:
        from .plots import plot_ensemble

        plot_ensemble(rc, ens, out)


# ---------------------------------------------------------------------------
# calibrate


def calibration_probes(rc: RunConfig, count: int, seed: int) -> list[np.ndarray]:
    """States on random rays from the first setpoint, placed between 30% and
    120% of the way to the state-constraint boundary so that the probe set
    mixes inactive, active and hard-infeasible constraints."""
    sys = rc.problem.sys
    segs = rc.controller.setpoints
    centre = segs[0].x_ss if segs else np.zeros(sys.n_x)
    S = sl.solve_discrete_lyapunov(sys.A, sys.G @ sys.Sigma_w @ sys.G.T)
    L = np.linalg.cholesky(S + 1e-12 * np.eye(sys.n_x))
    H, k = rc.problem.X.H, rc.problem.X.k
    rng = run_rng(seed, 0)
    fractions = np.linspace(0.3, 1.2, count) if count > 1 else np.array([0.9])
    probes = []
    for frac in fractions:
        d = L @ rng.standard_normal(sys.n_x)
        hd = H @ d
        room = k - H @ centre
        pos = hd > 0
        t = float(np.min(room[pos] / hd[pos])) if np.any(pos) else 4.0
        probes.append(centre + frac * t * d)
    return probes


def cmd_calibrate(args) -> int:
    rc = resolve_config(args.config)
    grid = _floats(args.grid, "--grid") if args.grid else list(10.0 ** np.arange(-1, 7))
    probes = calibration_probes(rc, args.probes, args.seed if args.seed is not None else rc.experiment.seed)
    rep = calibrate_rho(rc.problem, rc.controller, probes, grid)
    print(f"probes: {len(probes)}  hard-feasible: {rep.hard_feasible}")
    print(f"{'rho':>12} {'max slack':>12} {'max dev':>12}  qualified")
    for row in rep.rows:
        print(f"{row.rho:12.4g} {row.max_slack:12.3e} {row.max_deviation:12.3e}  {'yes' if row.qualified else 'no'}")
    if rep.ok:
        print(f"selected rho* = {rep.rho_star:g} (plateau deviation at 2 rho*: {rep.plateau_deviation:.3e})")
        if args.write_config:
            text = update_rho(Path(rc.source).read_text(), rep.rho_star)
            Path(args.write_config).write_text(text)
            print(f"updated configuration written to {args.write_config}")
        return EXIT_OK
    print(f"no rho qualified: {rep.diagnostics}")
    return EXIT_FAIL


def update_rho(text: str, rho: float) -> str:
    """Rewrite the ``rho:`` entry of the controller section in place."""
    lines = text.splitlines(keepends=True)
    in_ctl = False
    for i, line in enumerate(lines):
        stripped = line.lstrip()
        if line and not line[0].isspace() and stripped and not stripped.startswith("#"):
            in_ctl = stripped.startswith("controller:")
        if in_ctl and stripped.startswith("rho:"):
            indent = line[: len(line) - len(stripped)]
            comment = ""
            if "#" in stripped:
                comment = "  #" + stripped.split("#", 1)[1].rstrip("\n")
            lines[i] = f"{indent}rho: {rho!r}{comment}\n"
            return "".join(lines)
    raise ConfigError("configuration has no controller.rho entry to update")


# ---------------------------------------------------------------------------
# verify


def run_verification(rc: RunConfig) -> dict:
    from .verify import verification_suites

    return verification_suites(rc)


def cmd_verify(args) -> int:
    rc = resolve_config(args.config)
    report = run_verification(rc)
    text = json.dumps(_jsonable(report), indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if report["passed"] else EXIT_FAIL


# ---------------------------------------------------------------------------
# export


def cmd_export(args) -> int:
    rc = resolve_config(args.config)
    if args.state:
        vals = np.array(_floats(args.state, "--state"))
        if vals.size != rc.problem.sys.n_x:
            raise ConfigError(f"--state needs {rc.problem.sys.n_x} values, got {vals.size}")
        x = vals - (rc.problem.x_op if rc.problem.x_op is not None else 0.0)
    else:
        x = _initial_state(rc)
    ctrl = Controller(rc.problem, rc.controller, args.controller or rc.experiment.controller)
    step = args.step
    seg_idx = rc.controller.segment_index(step) if rc.controller.setpoints else 0
    bld = ctrl.builder(seg_idx)
    prog = bld.program(x - ctrl.setpoints[seg_idx].x_ss)
    if args.out:
        write_conic(prog, args.out)
        print(f"program with {prog.n} variables, {prog.b.size} equalities, {prog.dims.l} linear rows and "
              f"{len(prog.dims.q)} cones written to {args.out}")
    else:
        write_conic(prog, sys.stdout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="smpc", description="Stochastic MPC with saturated disturbance feedback.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default="abe", help="config file or bundled name (default: abe)")
        p.add_argument("--seed", type=int, default=None, help="base seed (overrides the config)")

    p = sub.add_parser("simulate", help="closed-loop Monte Carlo ensemble")
    common(p)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--controller", choices=("smpc", "nominal"), default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--snapshot-times", default=None, help="comma-separated times in hours")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="penalty weight calibration")
    common(p)
    p.add_argument("--grid", default=None, help="comma-separated rho values")
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--write-config", default=None, help="write a copy of the config with rho set to rho*")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("verify", help="run the invariant suites")
    common(p)
    p.add_argument("--out", default=None, help="also write the report to this file")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-socp", help="write the assembled program in the conic interchange format")
    common(p)
    p.add_argument("--out", default=None, help="output file (default: stdout)")
    p.add_argument("--state", default=None, help="comma-separated absolute state (default: initial state)")
    p.add_argument("--step", type=int, default=0, help="time step selecting the setpoint segment")
    p.add_argument("--controller", choices=("smpc", "nominal"), default=None)
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "runs", None) is not None and args.runs < 1:
        ap.error("--runs must be at least 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except argparse.ArgumentTypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
