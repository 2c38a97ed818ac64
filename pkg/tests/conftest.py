"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from smpc.chance import ChanceSpec
from smpc.controller import ControlProblem, ControllerConfig
from smpc.model import DisturbanceModel, LinearStochasticSystem, Polytope, WeightSpec
from smpc.saturation import SaturationPolicy
from smpc.solver import SolverSettings

# Lines of the form "CRITERION k PASS|FAIL ..." collected by the acceptance
# module and repeated in the terminal summary so they land in the log even
# when output capture is on.
CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def scalar_problem(a=0.5, b=1.0, g=1.0, var=1.0, u_max=1.0, x_max=10.0, family="gaussian"):
    sys = LinearStochasticSystem(np.array([[a]]), np.array([[b]]), np.array([[g]]),
                                 DisturbanceModel(np.array([[var]]), family))
    return ControlProblem(sys, Polytope.box([-u_max], [u_max]), Polytope.box([-x_max], [x_max]))


def scalar_config(N=3, q=1.0, r=1.0, rho=1000.0, alpha=0.1, delta=5.0, phi_max=3.0,
                  method="analytic", tol=1e-10) -> ControllerConfig:
    return ControllerConfig(
        N=N,
        weights=WeightSpec(np.array([[q]]), np.array([[r]]), rho=rho),
        chance=ChanceSpec(np.full(2, alpha), np.full(2, delta)),
        saturation=SaturationPolicy("hard_clip", phi_max),
        moment_method=method,
        solver=SolverSettings(backend="clarabel", tol=tol),
    )


def random_system(rng, n_x, n_u, radius=0.8, family="gaussian") -> LinearStochasticSystem:
    A = rng.normal(size=(n_x, n_x))
    A *= radius / max(abs(np.linalg.eigvals(A)))
    B = rng.normal(size=(n_x, n_u))
    G = np.eye(n_x) + 0.3 * rng.normal(size=(n_x, n_x))
    Sw = np.diag(rng.uniform(0.1, 1.0, n_x))
    return LinearStochasticSystem(A, B, G, DisturbanceModel(Sw, family))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
