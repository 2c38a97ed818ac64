import numpy as np
import pytest

from smpc.horizon import build_horizon_operators
from smpc.model import Polytope, WeightSpec

from conftest import random_system


@pytest.mark.parametrize("N", [1, 2, 4])
def test_prediction_matches_rollout(rng, N):
    sys = random_system(rng, 2, 1)
    ops = build_horizon_operators(sys, Polytope.box([-1], [1]), Polytope.box([-5, -5], [5, 5]),
                                  WeightSpec(np.eye(2), np.eye(1)), N)
    x0 = rng.normal(size=2)
    u = rng.normal(size=N)
    w = rng.normal(size=2 * N)
    x = [x0]
    for t in range(N):
        x.append(sys.step(x[-1], u[t:t + 1], w[2 * t:2 * t + 2]))
    assert np.allclose(ops.predict(x0, u, w), np.concatenate(x))


def test_shapes_and_readonly(rng):
    sys = random_system(rng, 3, 2)
    ops = build_horizon_operators(sys, Polytope.box(-np.ones(2), np.ones(2)), Polytope.box(-np.ones(3), np.ones(3)),
                                  WeightSpec(np.eye(3), np.eye(2)), 3)
    assert ops.bigA.shape == (12, 3)
    assert ops.bigB.shape == (12, 6)
    assert ops.bigHu.shape == (12, 6)
    assert ops.r == 6 and ops.s == 4
    with pytest.raises(ValueError):
        ops.bigA[0, 0] = 1.0


def test_state_row_selection(rng):
    sys = random_system(rng, 2, 1)
    ops = build_horizon_operators(sys, Polytope.box([-1], [1]), Polytope.box([-5, -5], [5, 5]),
                                  WeightSpec(np.eye(2), np.eye(1)), 2)
    rows = list(ops.state_rows())
    assert len(rows) == 2 * 4
    i, j, row = rows[5]
    assert (i, j) == (2, 1)
    assert np.array_equal(row[4:6], ops.Hx[1]) and not row[:4].any()
    with pytest.raises(IndexError):
        ops.state_row(0, 0)


def test_empty_horizon_rejected(rng):
    sys = random_system(rng, 1, 1)
    with pytest.raises(ValueError):
        build_horizon_operators(sys, Polytope.box([-1], [1]), Polytope.box([-1], [1]), WeightSpec(np.eye(1), np.eye(1)), 0)
