"""Plant description, constraint polytopes and disturbance model.

The plant is ``x+ = A x + B u + G w`` with ``w`` zero-mean i.i.d. and known
covariance.  Everything here is immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import stats
from scipy.optimize import linprog

PSD_PIVOT_TOL = 1e-12
FAMILIES = ("gaussian", "uniform", "laplace")


class UnstableSystemError(ValueError):
    """Raised when an operation requires a Schur-stable ``A``."""


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {arr.shape}")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


def is_psd(mat: np.ndarray, tol: float = PSD_PIVOT_TOL) -> bool:
    """Symmetric PSD test via a shifted Cholesky factorization."""
    mat = np.asarray(mat, dtype=float)
    if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, atol=1e-12, rtol=1e-10):
        return False
    if mat.size == 0:
        return True
    scale = max(1.0, float(np.max(np.abs(np.diag(mat)))))
    try:
        np.linalg.cholesky(mat + tol * scale * np.eye(mat.shape[0]))
    except np.linalg.LinAlgError:
        return False
    return True


def is_pd(mat: np.ndarray) -> bool:
    mat = np.asarray(mat, dtype=float)
    if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, atol=1e-12, rtol=1e-10):
        return False
    try:
        L = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        return False
    return bool(np.min(np.abs(np.diag(L))) > PSD_PIVOT_TOL)


def spectral_radius(A: np.ndarray) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def power_iteration_radius(A: np.ndarray, squarings: int = 50) -> float:
    """Spectral-radius estimate ``||A^k||^(1/k)`` with ``k = 2^squarings``.

    Independent of the eigenvalue path; used as a cross-check.  The matrix
    power is built by repeated squaring with renormalisation so that neither
    overflow nor underflow occurs.
    """
    M = np.atleast_2d(np.asarray(A, dtype=float)).copy()
    log_scale = 0.0
    k = 1
    for _ in range(squarings):
        nrm = np.linalg.norm(M, 2)
        if nrm == 0.0:
            return 0.0
        M /= nrm
        log_scale = 2.0 * (log_scale + np.log(nrm))
        M = M @ M
        k *= 2
    nrm = np.linalg.norm(M, 2)
    if nrm == 0.0:
        return 0.0
    return float(np.exp((log_scale + np.log(nrm)) / k))


@dataclass(frozen=True)
class DisturbanceModel:
    """Zero-mean i.i.d. disturbance with covariance ``cov``.

    ``w = L e`` with ``L L' = cov`` and ``e`` independent unit-variance
    variates from the tagged ``family``: ``gaussian``, ``uniform`` (on
    ``[-sqrt 3, sqrt 3]``) or ``laplace`` (scale ``1/sqrt 2``).  All three are
    symmetric, so odd saturations have zero mean under each.
    """

    cov: np.ndarray
    family: str = "gaussian"
    bounded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "cov", _as_matrix(self.cov, "cov"))
        if self.cov.shape[0] != self.cov.shape[1]:
            raise ValueError("disturbance covariance must be square")
        if self.family not in FAMILIES:
            raise ValueError(f"unsupported disturbance family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "bounded", self.family == "uniform")

    @property
    def n_w(self) -> int:
        return self.cov.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return np.zeros(self.n_w)

    def _factor(self) -> np.ndarray:
        return np.linalg.cholesky(self.cov) if self.n_w else np.zeros((0, 0))

    def standard(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.family == "gaussian":
            return rng.standard_normal(shape)
        if self.family == "uniform":
            return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), shape)
        return rng.laplace(0.0, 1.0 / np.sqrt(2.0), shape)

    def standard_ppf(self, u) -> np.ndarray:
        """Inverse CDF of the unit-variance variate (for quasi-random sampling)."""
        u = np.asarray(u, dtype=float)
        if self.family == "gaussian":
            return stats.norm.ppf(u)
        if self.family == "uniform":
            return np.sqrt(3.0) * (2.0 * u - 1.0)
        return stats.laplace.ppf(u, scale=1.0 / np.sqrt(2.0))

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        L = self._factor()
        shape = (self.n_w,) if size is None else (size, self.n_w)
        return self.standard(rng, shape) @ L.T


@dataclass(frozen=True)
class LinearStochasticSystem:
    A: np.ndarray
    B: np.ndarray
    G: np.ndarray
    disturbance: DisturbanceModel

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        G = _as_matrix(self.G, "G")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        if G.shape[0] != n:
            raise ValueError(f"G has {G.shape[0]} rows, expected {n}")
        if G.shape[1] != self.disturbance.n_w:
            raise ValueError(
                f"G has {G.shape[1]} columns but disturbance dimension is {self.disturbance.n_w}"
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "G", G)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_w(self) -> int:
        return self.G.shape[1]

    @property
    def Sigma_w(self) -> np.ndarray:
        return self.disturbance.cov

    def step(self, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        return self.A @ x + self.B @ u + self.G @ w


@dataclass(frozen=True)
class Polytope:
    """``{z : H z <= k}``."""

    H: np.ndarray
    k: np.ndarray

    def __post_init__(self):
        H = _as_matrix(self.H, "H")
        k = _frozen(np.atleast_1d(np.asarray(self.k, dtype=float)).ravel())
        if H.shape[0] != k.shape[0]:
            raise ValueError(f"H has {H.shape[0]} rows but k has length {k.shape[0]}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "k", k)

    @property
    def rows(self) -> int:
        return self.H.shape[0]

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @classmethod
    def box(cls, lower, upper) -> "Polytope":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        n = lower.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    def contains(self, z, tol: float = 0.0) -> bool:
        return bool(np.all(self.H @ np.asarray(z, dtype=float) <= self.k + tol))

    def shifted(self, center) -> "Polytope":
        """Polytope in coordinates ``z - center``."""
        center = np.asarray(center, dtype=float)
        return Polytope(self.H, self.k - self.H @ center)

    def interior_margin(self, point=None) -> float:
        """``min(k - H p)``; positive iff ``p`` is strictly interior."""
        p = np.zeros(self.dim) if point is None else np.asarray(point, dtype=float)
        if self.rows == 0:
            return np.inf
        return float(np.min(self.k - self.H @ p))

    def is_bounded(self) -> bool:
        """Bounded iff ``max/min z_i`` is finite for every coordinate (2n LPs)."""
        n = self.dim
        for i in range(n):
            for sign in (1.0, -1.0):
                c = np.zeros(n)
                c[i] = -sign
                res = linprog(c, A_ub=self.H, b_ub=self.k, bounds=[(None, None)] * n, method="highs")
                if res.status == 3:
                    return False
                if res.status == 2:
                    # empty set is trivially bounded
                    return True
        return True

    def box_bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        """(lower, upper) if every row is a signed unit vector, else None."""
        lo = np.full(self.dim, -np.inf)
        hi = np.full(self.dim, np.inf)
        for h, kk in zip(self.H, self.k):
            nz = np.flatnonzero(h)
            if nz.size != 1:
                return None
            j = nz[0]
            if h[j] > 0:
                hi[j] = min(hi[j], kk / h[j])
            else:
                lo[j] = max(lo[j], kk / h[j])
        return lo, hi


@dataclass(frozen=True)
class WeightSpec:
    Q: np.ndarray
    R: np.ndarray
    rho: float = 0.0

    def __post_init__(self):
        Q = _as_matrix(self.Q, "Q")
        R = _as_matrix(self.R, "R")
        if not is_psd(Q):
            raise ValueError("Q must be symmetric positive semidefinite")
        if not is_psd(R):
            raise ValueError("R must be symmetric positive semidefinite")
        if not (self.rho >= 0.0):
            raise ValueError(f"penalty rho must be nonnegative, got {self.rho}")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "rho", float(self.rho))

    def with_rho(self, rho: float) -> "WeightSpec":
        return WeightSpec(self.Q, self.R, rho)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    witness: float
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...] = field(default_factory=tuple)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def as_dict(self) -> dict:
        return {
            c.name: {"passed": c.passed, "witness": c.witness, "detail": c.detail}
            for c in self.checks
        }


def validate_system(sys: LinearStochasticSystem, U: Polytope, X: Polytope) -> ValidationReport:
    """Check the standing assumptions; never raises on a failed check."""
    checks = []
    rho = spectral_radius(sys.A)
    checks.append(CheckResult("schur_stable", rho < 1.0, rho, "spectral radius of A"))

    # Exact observation is structural here: the controller receives x itself.
    checks.append(CheckResult("state_observed", True, 0.0, "full state feedback"))

    cov = sys.Sigma_w
    sym = bool(np.allclose(cov, cov.T, atol=1e-12))
    min_eig = float(np.min(np.linalg.eigvalsh((cov + cov.T) / 2))) if cov.size else np.inf
    checks.append(
        CheckResult(
            "disturbance_covariance_pd",
            sym and is_pd(cov),
            min_eig,
            "minimum eigenvalue of Sigma_w",
        )
    )
    mean_ok = bool(np.all(sys.disturbance.mean == 0.0))
    checks.append(CheckResult("disturbance_zero_mean", mean_ok, 0.0, "zero-mean family"))

    if U.dim != sys.n_u:
        checks.append(CheckResult("input_set_dimension", False, U.dim, f"expected {sys.n_u}"))
    else:
        margin = U.interior_margin()
        checks.append(CheckResult("input_origin_interior", margin > 0.0, margin, "min(k_u - H_u 0)"))
        bounded = U.is_bounded()
        checks.append(CheckResult("input_set_bounded", bounded, float(bounded), "2 n_u LPs"))
    if X.dim != sys.n_x:
        checks.append(CheckResult("state_set_dimension", False, X.dim, f"expected {sys.n_x}"))
    else:
        checks.append(CheckResult("state_set_rows", X.rows >= 1, X.rows, "row count of H_x"))
    return ValidationReport(tuple(checks))


def discrete_lyapunov(
    A: np.ndarray, tol: float = 1e-12, max_iter: int = 10_000
) -> np.ndarray:
    """Solve ``A' P A - P = -I`` by the fixed-point iteration ``P <- A' P A + I``.

    Raises :class:`UnstableSystemError` if ``A`` is not Schur stable or the
    iteration fails to converge.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    if spectral_radius(A) >= 1.0:
        raise UnstableSystemError("unstable system: A is not Schur stable")
    P = np.eye(n)
    for _ in range(max_iter):
        P_next = A.T @ P @ A + np.eye(n)
        change = np.linalg.norm(P_next - P, "fro")
        P = P_next
        if change <= tol * np.linalg.norm(P, "fro"):
            break
    else:
        # Slowly contracting A: finish with the direct (Kronecker-free) solver.
        P = sla.solve_discrete_lyapunov(A.T, np.eye(n))
    P = 0.5 * (P + P.T)
    resid = np.linalg.norm(A.T @ P @ A - P + np.eye(n), "fro")
    if resid > 1e-10 * np.linalg.norm(P, "fro"):
        raise UnstableSystemError(f"Lyapunov residual {resid:.3e} too large")
    return P
