"""Solver settings and solution container shared by all backends."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATUSES = ("optimal", "max-iterations", "numerical-failure", "primal-infeasible", "dual-infeasible")
BACKENDS = ("reference", "clarabel")


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-8
    max_iter: int = 200
    scaling: bool = True
    ruiz_sweeps: int = 5
    backend: str = "reference"
    warm_start: bool = False
    regularization: float = 1e-13
    step_fraction: float = 0.99

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown solver backend {self.backend!r}; expected one of {BACKENDS}")
        if not self.tol > 0:
            raise ValueError("solver tolerance must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class ConicSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    gap: float
    iterations: int
    solve_time: float
    objective: float
    dual_objective: float
    solver: str
    var_blocks: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def block(self, name: str) -> np.ndarray:
        return self.x[self.var_blocks[name]]

    def complementarity(self, dims) -> float:
        """Largest per-row/per-cone ``|s_i z_i|`` (linear) or ``|s'z|`` (cone)."""
        worst = 0.0
        if dims.l:
            worst = float(np.max(np.abs(self.s[: dims.l] * self.z[: dims.l])))
        pos = dims.l
        for q in dims.q:
            worst = max(worst, abs(float(self.s[pos:pos + q] @ self.z[pos:pos + q])))
            pos += q
        return worst
