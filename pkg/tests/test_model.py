import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smpc.model import (
    FAMILIES,
    DisturbanceModel,
    LinearStochasticSystem,
    Polytope,
    UnstableSystemError,
    WeightSpec,
    discrete_lyapunov,
    is_psd,
    power_iteration_radius,
    spectral_radius,
    validate_system,
)


def test_lyapunov_residual_and_closed_form():
    A = np.array([[0.5, 0.2], [0.0, 0.3]])
    P = discrete_lyapunov(A)
    assert np.allclose(A.T @ P @ A - P, -np.eye(2), atol=1e-10)
    assert np.allclose(discrete_lyapunov(np.array([[0.5]])), [[4.0 / 3.0]])


def test_lyapunov_rejects_unstable():
    with pytest.raises(UnstableSystemError):
        discrete_lyapunov(np.array([[1.01]]))


def test_lyapunov_slow_contraction_falls_back():
    A = np.array([[0.99995]])
    P = discrete_lyapunov(A, max_iter=100)
    assert P[0, 0] == pytest.approx(1.0 / (1.0 - 0.99995**2), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_power_iteration_matches_eigenvalues(n, seed):
    A = np.random.default_rng(seed).normal(size=(n, n))
    assert power_iteration_radius(A) == pytest.approx(spectral_radius(A), rel=1e-6, abs=1e-12)


def test_psd_checks():
    assert is_psd(np.diag([1.0, 0.0]))
    assert not is_psd(np.diag([1.0, -1e-3]))


@pytest.mark.parametrize("family", FAMILIES)
def test_disturbance_families_have_requested_covariance(family):
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    w = DisturbanceModel(cov, family).sample(np.random.default_rng(1), 400_000)
    assert np.allclose(w.mean(axis=0), 0.0, atol=1e-2)
    assert np.allclose(np.cov(w.T), cov, atol=1.5e-2)


def test_disturbance_rejects_unknown_family():
    with pytest.raises(ValueError, match="unsupported disturbance family"):
        DisturbanceModel(np.eye(1), "cauchy")


def test_uniform_ppf_is_bounded_and_unit_variance():
    d = DisturbanceModel(np.eye(1), "uniform")
    u = (np.arange(10_000) + 0.5) / 10_000
    e = d.standard_ppf(u)
    assert np.max(np.abs(e)) <= np.sqrt(3.0)
    assert np.mean(e * e) == pytest.approx(1.0, rel=1e-6)


def test_system_shape_checks():
    with pytest.raises(ValueError):
        LinearStochasticSystem(np.eye(2), np.ones((3, 1)), np.eye(2), DisturbanceModel(np.eye(2)))
    with pytest.raises(ValueError):
        LinearStochasticSystem(np.eye(2), np.ones((2, 1)), np.eye(2), DisturbanceModel(np.eye(3)))


def test_polytope_box_and_margin():
    P = Polytope.box([-1.0, -2.0], [1.0, 3.0])
    assert P.rows == 4 and P.dim == 2
    assert P.contains([0.5, 2.9]) and not P.contains([0.5, 3.1])
    assert P.interior_margin() == pytest.approx(1.0)
    lo, hi = P.box_bounds()
    assert np.allclose(lo, [-1, -2]) and np.allclose(hi, [1, 3])
    assert P.is_bounded()
    S = P.shifted([0.5, 0.0])
    assert S.contains([-1.5, 0.0]) and not S.contains([0.6, 0.0])


def test_weights_validation():
    WeightSpec(np.eye(1), np.zeros((1, 1)), rho=1.0)  # semidefinite R is allowed
    with pytest.raises(ValueError):
        WeightSpec(-np.eye(1), np.eye(1), rho=1.0)
    with pytest.raises(ValueError):
        WeightSpec(np.eye(1), np.eye(1), rho=-1.0)


def test_validate_system_reports_instead_of_raising():
    sys = LinearStochasticSystem(np.array([[1.2]]), np.eye(1), np.eye(1), DisturbanceModel(np.eye(1)))
    rep = validate_system(sys, Polytope.box([0.1], [1.0]), Polytope.box([-1], [1]))
    assert not rep.passed
    names = {c.name for c in rep.failures()}
    assert {"schur_stable", "input_origin_interior"} <= names
