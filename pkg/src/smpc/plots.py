"""Static SVG figures for a finished ensemble.

The SVG writer is pinned (fixed hash salt, no date stamp) so identical data
gives byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "smpc"
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_ensemble(rc, ens, out: Path) -> list[Path]:
    plt = _pyplot()
    p = rc.problem
    names = list(p.state_names)
    dt = rc.sampling_period_hr
    X = np.stack([p.absolute_x(tr.x) for tr in ens.traces])
    t = np.arange(X.shape[1]) * dt
    written = []

    if rc.tracked:
        fig, axes = plt.subplots(len(rc.tracked), 1, figsize=(6, 2.4 * len(rc.tracked)), sharex=True, squeeze=False)
        for ax, idx in zip(axes[:, 0], rc.tracked):
            for run in X:
                ax.plot(t, run[:, idx], color="0.6", lw=0.4)
            ax.plot(t, X[:, :, idx].mean(axis=0), color="C0", lw=1.4, label="ensemble mean")
            k = list(rc.tracked).index(idx)
            sp_t = [s * dt for s, _ in rc.setpoint_values] + [t[-1]]
            sp_v = [v[k] for _, v in rc.setpoint_values]
            ax.step(sp_t, sp_v + sp_v[-1:], where="post", color="C3", ls="--", lw=1.0, label="setpoint")
            ax.set_ylabel(f"{names[idx]} [mM]")
        axes[0, 0].legend(loc="lower right", fontsize=8)
        axes[-1, 0].set_xlabel("time [hr]")
        fig.tight_layout()
        path = out / "tracked_states.svg"
        _save(fig, path)
        plt.close(fig)
        written.append(path)

    if rc.constrained and ens.snapshots:
        steps = sorted(ens.snapshots)
        fig, axes = plt.subplots(len(rc.constrained), 1, figsize=(6, 2.6 * len(rc.constrained)), squeeze=False)
        H, k = p.X.H, p.X.k
        for ax, idx in zip(axes[:, 0], rc.constrained):
            for n, s in enumerate(steps):
                vals = p.absolute_x(ens.snapshots[s])[:, idx]
                ax.hist(vals, bins=20, histtype="step", color=f"C{n}", label=f"t = {s * dt:g} hr")
            for j in np.flatnonzero(H[:, idx]):
                bound = k[j] / H[j, idx] + (p.x_op[idx] if p.x_op is not None else 0.0)
                ax.axvline(bound, color="k", ls=":", lw=1.0)
            ax.set_xlabel(f"{names[idx]} [mM]")
            ax.set_ylabel("runs")
        axes[0, 0].legend(fontsize=8)
        fig.tight_layout()
        path = out / "constrained_histograms.svg"
        _save(fig, path)
        plt.close(fig)
        written.append(path)
    return written
