"""Element-wise saturation of the disturbance feedback and its moments.

The feedback term uses ``phi(G w)`` instead of ``G w``.  ``phi`` is odd and
bounded by ``phi_max`` so that hard input bounds survive unbounded noise.
The program needs ``Omega1 = E[phi phi']`` and ``Omega2 = E[phi w']`` for
the stacked horizon; disturbances are i.i.d. so both are block diagonal
with one repeated per-step block.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats
from scipy.stats import qmc

from .model import LinearStochasticSystem, Polytope

KINDS = ("hard_clip", "sigmoid")
METHODS = ("analytic", "quadrature", "quasi_random")


@dataclass(frozen=True)
class SaturationPolicy:
    """``hard_clip``: ``clip(a, -phi_max, phi_max)``.

    ``sigmoid``: ``phi_max * tanh(a / scale)`` with ``scale`` defaulting to
    ``phi_max`` (unit slope at the origin).
    """

    kind: str = "hard_clip"
    phi_max: float = 1.0
    scale: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown saturation kind {self.kind!r}; expected one of {KINDS}")
        if not (self.phi_max > 0.0):
            raise ValueError("phi_max must be positive")
        if self.scale is not None and not (self.scale > 0.0):
            raise ValueError("sigmoid scale must be positive")

    def __call__(self, a):
        a = np.asarray(a, dtype=float)
        if self.kind == "hard_clip":
            if np.isinf(self.phi_max):
                return a.copy()
            return np.clip(a, -self.phi_max, self.phi_max)
        scale = self.phi_max if self.scale is None else self.scale
        return self.phi_max * np.tanh(a / scale)


def apply_saturation(policy: SaturationPolicy, gw) -> np.ndarray:
    return policy(gw)


def saturated_support(policy: SaturationPolicy, N: int, n_x: int) -> Polytope:
    """Infinity-norm box ``{w : |w_i| <= phi_max}`` of dimension ``n_x N``."""
    dim = n_x * N
    eye = np.eye(dim)
    return Polytope(np.vstack([eye, -eye]), np.full(2 * dim, policy.phi_max))


@dataclass(frozen=True)
class SaturationMoments:
    Omega1: np.ndarray
    Omega2: np.ndarray
    block1: np.ndarray
    block2: np.ndarray
    mean_phi: np.ndarray
    method: str
    samples: int | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.Omega1.shape[0] // self.block1.shape[0]


def _std_normal_pdf(k):
    return stats.norm.pdf(k)


def hard_clip_gaussian_second_moment(s: float, c: float) -> float:
    """``E[clip(a, -c, c)^2]`` for ``a ~ N(0, s^2)``."""
    if s == 0.0:
        return 0.0
    if np.isinf(c):
        return s * s
    k = c / s
    inner = s * s * (2.0 * stats.norm.cdf(k) - 1.0) - 2.0 * s * s * k * _std_normal_pdf(k)
    return float(inner + 2.0 * c * c * stats.norm.sf(k))


def hard_clip_gaussian_gain(s: float, c: float) -> float:
    """``E[clip(a) a] / E[a^2] = 2 Phi(c/s) - 1`` for ``a ~ N(0, s^2)``."""
    if s == 0.0:
        return 0.0
    if np.isinf(c):
        return 1.0
    return float(2.0 * stats.norm.cdf(c / s) - 1.0)


def _independent_components(C: np.ndarray, tol: float = 1e-14) -> bool:
    off = C - np.diag(np.diag(C))
    return bool(np.all(np.abs(off) <= tol * max(1.0, np.max(np.abs(C)))))


def _analytic_block(policy, G, Sigma):
    if policy.kind != "hard_clip":
        raise ValueError("analytic path only covers hard_clip saturation")
    C = G @ Sigma @ G.T
    if not _independent_components(C):
        raise ValueError(
            "analytic path requires element-wise independence of G w; "
            "use method='quadrature' or 'quasi_random'"
        )
    sd = np.sqrt(np.diag(C))
    n_x = G.shape[0]
    b1 = np.zeros((n_x, n_x))
    gains = np.zeros(n_x)
    for k in range(n_x):
        b1[k, k] = hard_clip_gaussian_second_moment(sd[k], policy.phi_max)
        gains[k] = hard_clip_gaussian_gain(sd[k], policy.phi_max)
    # Gaussian regression: E[phi(a_k) w] = Cov(w, a_k) / Var(a_k) * E[phi(a_k) a_k].
    b2 = gains[:, None] * (G @ Sigma)
    return b1, b2, np.zeros(n_x)


def _clip_breaks(policy, s):
    if policy.kind == "hard_clip" and s > 0 and np.isfinite(policy.phi_max):
        return [-policy.phi_max / s, policy.phi_max / s]
    return []


def _expect_1d(fun, s, breaks, lim=12.0):
    if s == 0.0:
        return float(fun(0.0))
    pts = [b for b in breaks if -lim < b < lim]
    # The tolerances sit at the roundoff floor on purpose; quad's warning
    # about not reaching them is expected and not actionable.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(
            lambda t: fun(s * t) * _std_normal_pdf(t), -lim, lim,
            limit=400, epsabs=1e-15, epsrel=1e-13, points=pts or None,
        )
    return float(val)


def _quadrature_block(policy, G, Sigma):
    """1-D/2-D Gaussian quadrature; handles correlated components of ``G w``."""
    C = G @ Sigma @ G.T
    n_x = G.shape[0]
    sd = np.sqrt(np.maximum(np.diag(C), 0.0))
    phi = policy
    b1 = np.zeros((n_x, n_x))
    mean = np.zeros(n_x)
    gains = np.zeros(n_x)
    for k in range(n_x):
        br = _clip_breaks(policy, sd[k])
        mean[k] = _expect_1d(lambda a: phi(a), sd[k], br)
        b1[k, k] = _expect_1d(lambda a: phi(a) ** 2, sd[k], br)
        # E[phi(a) a] / Var(a)
        gains[k] = _expect_1d(lambda a: phi(a) * a, sd[k], br) / C[k, k] if sd[k] > 0 else 0.0
    for k in range(n_x):
        for l in range(k + 1, n_x):
            if sd[k] == 0.0 or sd[l] == 0.0 or C[k, l] == 0.0:
                b1[k, l] = b1[l, k] = mean[k] * mean[l]
                continue
            corr = C[k, l] / (sd[k] * sd[l])
            cond_sd = sd[l] * np.sqrt(max(1.0 - corr * corr, 0.0))

            def inner(a_k, k=k, l=l, corr=corr, cond_sd=cond_sd):
                m = corr * sd[l] / sd[k] * a_k
                if cond_sd == 0.0:
                    return phi(a_k) * phi(m)
                br = [(-policy.phi_max - m) / cond_sd, (policy.phi_max - m) / cond_sd] if policy.kind == "hard_clip" else []
                return phi(a_k) * _expect_1d(lambda b: phi(m + b), cond_sd, br)

            b1[k, l] = b1[l, k] = _expect_1d(inner, sd[k], _clip_breaks(policy, sd[k]))
    # w and a_k are jointly Gaussian: E[phi(a_k) w] = Cov(w, a_k)/Var(a_k) E[phi(a_k) a_k].
    b2 = gains[:, None] * (G @ Sigma)
    return b1, b2, mean


def _quasi_random_block(policy, G, Sigma, samples, seed, ppf=stats.norm.ppf):
    n_w = Sigma.shape[0]
    m = int(np.log2(samples))
    if 2**m != samples:
        raise ValueError("quasi-random sample count must be a power of two")
    sobol = qmc.Sobol(d=n_w, scramble=True, seed=seed)
    u = sobol.random_base2(m)
    z = ppf(u)
    L = np.linalg.cholesky(Sigma)
    w = z @ L.T
    # Antithetic pairing keeps the sample mean of the odd map exactly zero.
    w = np.vstack([w, -w])
    ph = policy(w @ G.T)
    n = w.shape[0]
    b1 = ph.T @ ph / n
    b2 = ph.T @ w / n
    return 0.5 * (b1 + b1.T), b2, ph.mean(axis=0)


def saturation_moments(
    policy: SaturationPolicy,
    sys: LinearStochasticSystem,
    N: int,
    method: str = "analytic",
    samples: int = 2**16,
    seed: int = 0,
) -> SaturationMoments:
    """Per-step moment block computed once and tiled ``N`` times."""
    if method not in METHODS:
        raise ValueError(f"unknown moment method {method!r}")
    G, Sigma = sys.G, sys.Sigma_w
    family = sys.disturbance.family
    if family != "gaussian" and method != "quasi_random":
        raise ValueError(f"{method} moments assume Gaussian disturbances, not {family!r}; use quasi_random")
    if method == "analytic":
        b1, b2, mean = _analytic_block(policy, G, Sigma)
        tol = 1e-6
    elif method == "quadrature":
        b1, b2, mean = _quadrature_block(policy, G, Sigma)
        tol = 1e-6
    else:
        b1, b2, mean = _quasi_random_block(policy, G, Sigma, samples, seed, sys.disturbance.standard_ppf)
        tol = 3.0 / np.sqrt(samples)
    if np.max(np.abs(mean), initial=0.0) > tol:
        raise ValueError(f"E[phi(Gw)] = {mean} is not zero; saturation must be odd")
    eye = np.eye(N)
    Omega1 = np.kron(eye, b1)
    Omega2 = np.kron(eye, b2)
    for arr in (Omega1, Omega2, b1, b2):
        arr.setflags(write=False)
    return SaturationMoments(
        Omega1=Omega1,
        Omega2=Omega2,
        block1=b1,
        block2=b2,
        mean_phi=mean,
        method=method,
        samples=samples if method == "quasi_random" else None,
        seed=seed if method == "quasi_random" else None,
    )


def zero_moments(n_x: int, n_w: int, N: int) -> SaturationMoments:
    """Moments of a feedback-free controller (used by the nominal baseline)."""
    b1 = np.zeros((n_x, n_x))
    b2 = np.zeros((n_x, n_w))
    return SaturationMoments(
        Omega1=np.zeros((n_x * N, n_x * N)),
        Omega2=np.zeros((n_x * N, n_w * N)),
        block1=b1,
        block2=b2,
        mean_phi=np.zeros(n_x),
        method="zero",
    )
