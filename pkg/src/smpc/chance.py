"""Joint chance constraint splitting and Cantelli-Chebyshev tightening.

A joint budget ``beta`` over the ``r`` rows of ``H_x x <= k_x`` is split
into per-row budgets ``alpha_j`` (union bound).  Each row then becomes a
mean constraint backed off by ``delta_j`` plus a variance cap
``alpha_j delta_j^2 / (1 - alpha_j)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .horizon import HorizonOperators

SUM_TOL = 1e-12


def decompose_jcc(beta: float, r: int, allocation="uniform") -> np.ndarray:
    """Split a joint violation budget across ``r`` rows.

    ``allocation`` is ``"uniform"`` or an explicit vector that must sum to
    ``beta``.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if r < 1:
        raise ValueError("need at least one constraint row")
    if isinstance(allocation, str):
        if allocation != "uniform":
            raise ValueError(f"unknown allocation {allocation!r}")
        return np.full(r, beta / r)
    alpha = np.asarray(allocation, dtype=float).ravel()
    if alpha.size != r:
        raise ValueError(f"explicit allocation has {alpha.size} entries, expected {r}")
    if np.any(alpha < 0.0):
        raise ValueError("per-row budgets must be nonnegative")
    if abs(alpha.sum() - beta) > SUM_TOL:
        raise ValueError(f"per-row budgets sum to {alpha.sum()!r}, expected beta={beta!r}")
    return alpha.copy()


def variance_cap(alpha: float, delta: float) -> float:
    if alpha >= 1.0:
        raise ValueError("alpha = 1 leaves no variance cap (division by zero)")
    if alpha < 0.0:
        raise ValueError("alpha must be nonnegative")
    return alpha * delta * delta / (1.0 - alpha)


@dataclass(frozen=True)
class ChanceSpec:
    alpha: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        delta = np.asarray(self.delta, dtype=float).ravel()
        if alpha.shape != delta.shape:
            raise ValueError("alpha and delta must have one entry per state-constraint row")
        if np.any(alpha < 0.0) or np.any(alpha >= 1.0):
            raise ValueError("each alpha_j must lie in [0, 1)")
        if np.any(delta <= 0.0):
            raise ValueError("each delta_j must be positive")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "delta", delta)

    @property
    def beta(self) -> float:
        return float(self.alpha.sum())

    @property
    def r(self) -> int:
        return self.alpha.size

    @classmethod
    def from_budget(cls, beta: float, delta, allocation="uniform") -> "ChanceSpec":
        delta = np.asarray(delta, dtype=float).ravel()
        return cls(decompose_jcc(beta, delta.size, allocation), delta)


@dataclass(frozen=True)
class TightenedStateConstraint:
    i: int
    j: int
    row: np.ndarray
    mean_rhs: float
    var_cap: float
    bound: float


def default_delta(kx: np.ndarray, Hx: np.ndarray, x_ss=None, fraction: float = 0.25) -> np.ndarray:
    """Back-off equal to ``fraction`` of the slack at the operating point."""
    x_ss = np.zeros(Hx.shape[1]) if x_ss is None else np.asarray(x_ss, dtype=float)
    slack = np.asarray(kx, dtype=float) - Hx @ x_ss
    if np.any(slack <= 0.0):
        raise ValueError("operating point is not strictly inside the state constraints")
    return fraction * slack


def cantelli_tighten(spec: ChanceSpec, ops: HorizonOperators) -> list[TightenedStateConstraint]:
    """One (mean row, variance cap) pair per step ``i`` in 1..N and row ``j``."""
    if spec.r != ops.r:
        raise ValueError(f"chance spec has {spec.r} rows, state polytope has {ops.r}")
    out = []
    for i, j, row in ops.state_rows():
        out.append(
            TightenedStateConstraint(
                i=i,
                j=j,
                row=row,
                mean_rhs=float(ops.kx[j] - spec.delta[j]),
                var_cap=variance_cap(spec.alpha[j], spec.delta[j]),
                bound=float(ops.kx[j]),
            )
        )
    return out


def cantelli_bound(variance: float, margin: float) -> float:
    """Upper bound on ``Pr[Z >= E Z + margin]``."""
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if variance == 0.0:
        return 0.0 if margin > 0 else 1.0
    return variance / (variance + margin * margin)
