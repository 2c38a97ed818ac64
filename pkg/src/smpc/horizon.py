"""Stacked prediction operators over a horizon of N steps.

With ``x = [x_0; ...; x_N]`` and ``u = [u_0; ...; u_{N-1}]`` the prediction
is ``x = bigA x_0 + bigB u + bigD bigG w``.  All operators are dense.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LinearStochasticSystem, Polytope, WeightSpec


@dataclass(frozen=True)
class HorizonOperators:
    N: int
    n_x: int
    n_u: int
    n_w: int
    bigA: np.ndarray
    bigD: np.ndarray
    bigB: np.ndarray
    bigG: np.ndarray
    bigQ: np.ndarray
    bigR: np.ndarray
    bigHu: np.ndarray
    bigku: np.ndarray
    Hx: np.ndarray
    kx: np.ndarray

    @property
    def r(self) -> int:
        return self.Hx.shape[0]

    @property
    def s(self) -> int:
        return self.bigHu.shape[0] // self.N

    def state_row(self, i: int, j: int) -> np.ndarray:
        """Row ``j`` of ``[0..1..0] (x) H_x`` picking predicted state ``i`` (1..N)."""
        if not 1 <= i <= self.N:
            raise IndexError(f"prediction step {i} outside [1, {self.N}]")
        row = np.zeros((self.N + 1) * self.n_x)
        row[i * self.n_x:(i + 1) * self.n_x] = self.Hx[j]
        return row

    def state_rows(self):
        """Yield ``(i, j, row)`` for i in 1..N, j in 0..r-1 (step-major)."""
        for i in range(1, self.N + 1):
            for j in range(self.r):
                yield i, j, self.state_row(i, j)

    def predict(self, x0, u, w) -> np.ndarray:
        return self.bigA @ x0 + self.bigB @ u + self.bigD @ (self.bigG @ w)

    def block(self, stacked: np.ndarray, i: int) -> np.ndarray:
        return stacked[i * self.n_x:(i + 1) * self.n_x]


def build_horizon_operators(
    sys: LinearStochasticSystem, U: Polytope, X: Polytope, weights: WeightSpec, N: int
) -> HorizonOperators:
    if N < 1:
        raise ValueError("empty horizon: N must be at least 1")
    n_x, n_u, n_w = sys.n_x, sys.n_u, sys.n_w
    A = sys.A

    powers = [np.eye(n_x)]
    for _ in range(N):
        powers.append(powers[-1] @ A)

    bigA = np.vstack(powers)
    bigD = np.zeros(((N + 1) * n_x, N * n_x))
    for i in range(1, N + 1):
        for j in range(i):
            bigD[i * n_x:(i + 1) * n_x, j * n_x:(j + 1) * n_x] = powers[i - 1 - j]
    bigB = bigD @ np.kron(np.eye(N), sys.B)
    bigG = np.kron(np.eye(N), sys.G)
    bigQ = np.kron(np.eye(N + 1), weights.Q)
    bigR = np.kron(np.eye(N), weights.R)
    bigHu = np.kron(np.eye(N), U.H)
    bigku = np.tile(U.k, N)

    ops = HorizonOperators(
        N=N, n_x=n_x, n_u=n_u, n_w=n_w,
        bigA=bigA, bigD=bigD, bigB=bigB, bigG=bigG,
        bigQ=bigQ, bigR=bigR, bigHu=bigHu, bigku=bigku,
        Hx=np.array(X.H), kx=np.array(X.k),
    )
    for arr in (bigA, bigD, bigB, bigG, bigQ, bigR, bigHu, bigku, ops.Hx, ops.kx):
        arr.setflags(write=False)
    return ops
