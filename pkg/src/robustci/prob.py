"""Probability kernels for the connect probability of a CI user.

The connect probability of a precoder is the upper-orthant probability
``P{v1 >= w1, v2 >= w2}`` of a zero-mean bivariate normal pair.  It is
evaluated as the two-erf bound plus the lower-orthant term, the latter by a
one-dimensional integral over the correlation parameter.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError, UsageError
from .model import CI_TOL, ConeData

SQRT2 = math.sqrt(2.0)
TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)

ORTHANT_ABS_TOL = 1e-10
RHO_EDGE = 1.0 - 1e-9
MC_CHUNK = 1 << 16

# 20-point Gauss-Legendre rule on [-1, 1]
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)


def erf(x):
    return special.erf(x)


def erf_inv(p: float, tol: float = 1e-13) -> float:
    """Inverse error function by safeguarded Newton iteration.

    For ``|p| > 0.5`` the residual is formed with ``erfc`` so that targets
    close to +-1 keep full relative accuracy.
    """
    p = float(p)
    if not -1.0 < p < 1.0:
        raise DomainError(f"erf_inv requires |p| < 1, got {p}")
    if p == 0.0:
        return 0.0
    if p < 0.0:
        return -erf_inv(-p, tol)

    if p > 0.5:
        q = 1.0 - p  # exact for p in [0.5, 1)

        def resid(x):
            return q - math.erfc(x)
    else:
        def resid(x):
            return math.erf(x) - p

    lo, hi = 0.0, 6.0
    # initial guess from the Gaussian tail, clipped into the bracket
    x = math.sqrt(-math.log((1.0 - p) * (1.0 + p))) if p > 0.5 else p / TWO_OVER_SQRT_PI
    x = min(max(x, lo), hi)
    for _ in range(200):
        f = resid(x)
        if f == 0.0:
            return x
        if f > 0.0:
            hi = x
        else:
            lo = x
        step = f / (TWO_OVER_SQRT_PI * math.exp(-x * x))
        x_new = x - step
        if not lo < x_new < hi:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= tol * max(1.0, abs(x)):
            return x_new
        x = x_new
    return x


def g_tightening(mu1, mu2):
    return -(erf(mu1) + erf(mu2)) / 2.0


def radius(p_hat: float) -> float:
    """Sphere radius ``sqrt(2) * erf_inv(p_hat)``."""
    if not 0.0 <= p_hat < 1.0:
        raise DomainError(f"radius requires 0 <= p_hat < 1, got {p_hat}")
    return SQRT2 * erf_inv(p_hat)


@dataclass(frozen=True)
class GaussianMoments:
    w1: float
    w2: float
    sigma_v1: float
    sigma_v2: float
    rho: float  # nan when degenerate

    @property
    def degenerate(self) -> bool:
        return self.sigma_v1 == 0.0 or self.sigma_v2 == 0.0


@dataclass(frozen=True)
class ProbEstimate:
    value: float
    std_err: float
    n_samples: int

    @classmethod
    def from_count(cls, hits: int, n: int) -> "ProbEstimate":
        v = hits / n
        return cls(v, math.sqrt(v * (1.0 - v) / n), n)


def moments(x_tilde, cone: ConeData, gamma_hat: float, sigma_z: float) -> GaussianMoments:
    x = np.asarray(x_tilde, dtype=float)
    if x.shape != cone.a_minus.shape:
        raise UsageError(f"x_tilde has shape {x.shape}, expected {cone.a_minus.shape}")
    offset = math.sqrt(gamma_hat) * sigma_z
    u1 = cone.d_minus @ x
    u2 = cone.d_plus @ x
    s1 = float(np.linalg.norm(u1))
    s2 = float(np.linalg.norm(u2))
    if s1 == 0.0 or s2 == 0.0:
        rho = math.nan
    else:
        rho = min(1.0, max(-1.0, float(u1 @ u2) / s1 / s2))
    return GaussianMoments(
        w1=float(-cone.a_minus @ x + offset),
        w2=float(-cone.a_plus @ x + offset),
        sigma_v1=s1,
        sigma_v2=s2,
        rho=rho,
    )


def norm_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / SQRT2)


def _gl(f, a, b):
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    return half * float(_GL_WEIGHTS @ f(mid + half * _GL_NODES))


def adaptive_gauss_legendre(f, a: float, b: float, tol: float = ORTHANT_ABS_TOL,
                            max_depth: int = 30) -> float:
    """Integrate a vectorized ``f`` over ``[a, b]`` by interval bisection.

    An interval is accepted when its 20-point estimate and the sum of the
    estimates on its halves agree within the share of ``tol`` allotted to it.
    """
    if a == b:
        return 0.0
    total = 0.0
    width = abs(b - a)
    stack = [(a, b, _gl(f, a, b), 0)]
    while stack:
        lo, hi, whole, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = _gl(f, lo, mid), _gl(f, mid, hi)
        if abs(left + right - whole) <= tol * abs(hi - lo) / width or depth >= max_depth:
            total += left + right
        else:
            stack.append((mid, hi, right, depth + 1))
            stack.append((lo, mid, left, depth + 1))
    return total


def bvn_lower(h: float, k: float, rho: float) -> float:
    """``P{X <= h, Y <= k}`` for standard normals with correlation ``rho``.

    Uses ``Phi2 = Phi(h) Phi(k) + 1/(2 pi) int_0^{asin rho} exp(-q(phi)) dphi``
    with ``q = ((h - k sin phi)^2 / cos^2 phi + k^2) / 2``, which is smooth
    in ``phi`` even as ``|rho| -> 1``.
    """
    if math.isinf(h) or math.isinf(k):
        if h == -math.inf or k == -math.inf:
            return 0.0
        return norm_cdf(min(h, k))
    if rho > RHO_EDGE:
        return norm_cdf(min(h, k))
    if rho < -RHO_EDGE:
        return max(0.0, norm_cdf(h) - norm_cdf(-k))
    base = norm_cdf(h) * norm_cdf(k)
    if rho == 0.0:
        return base

    def integrand(phi):
        s = np.sin(phi)
        c2 = np.cos(phi) ** 2
        return np.exp(-0.5 * ((h - k * s) ** 2 / c2 + k * k))

    extra = adaptive_gauss_legendre(integrand, 0.0, math.asin(rho)) / (2.0 * math.pi)
    return min(1.0, max(0.0, base + extra))


def bvn_upper(a: float, b: float, rho: float) -> float:
    """``P{X >= a, Y >= b}`` for standard normals with correlation ``rho``."""
    return bvn_lower(-a, -b, rho)


def first_tighten_bound(m: GaussianMoments) -> float:
    """Two-erf lower bound ``-(erf(w1/(sqrt2 s1)) + erf(w2/(sqrt2 s2))) / 2``."""
    if m.degenerate:
        raise DomainError("first_tighten_bound needs nonzero sigma_v1 and sigma_v2")
    return float(g_tightening(m.w1 / (SQRT2 * m.sigma_v1), m.w2 / (SQRT2 * m.sigma_v2)))


def connect_prob_exact(m: GaussianMoments) -> float:
    """Upper-orthant probability ``P{v1 >= w1, v2 >= w2}``.

    A component with zero spread is deterministic and contributes the
    indicator ``w <= CI_TOL``.
    """
    if m.degenerate:
        p = 1.0
        for w, s in ((m.w1, m.sigma_v1), (m.w2, m.sigma_v2)):
            if s == 0.0:
                p *= 1.0 if w <= CI_TOL else 0.0
            else:
                p *= norm_cdf(-w / s)
        return p
    a = m.w1 / m.sigma_v1
    b = m.w2 / m.sigma_v2
    # P{v1 >= w1, v2 >= w2} = bound + P{v1 <= w1, v2 <= w2}
    lower = bvn_lower(a, b, m.rho)
    bound = first_tighten_bound(m)
    return min(1.0, max(0.0, bound + lower))


def substream(seed, *key: int) -> np.random.Generator:
    """Generator for the substream ``key`` of a master seed.

    ``seed`` is an integer or a tuple ``(master, *prefix)``; streams with
    distinct keys are statistically independent and do not depend on the
    order in which they are created.
    """
    if isinstance(seed, tuple):
        master, prefix = seed[0], tuple(seed[1:])
    else:
        master, prefix = seed, ()
    return np.random.default_rng(np.random.SeedSequence(int(master), spawn_key=prefix + key))


def connect_prob_mc(x_tilde, cone: ConeData, gamma_hat: float, sigma_z: float,
                    n_samples: int, seed, workers: int = 1) -> ProbEstimate:
    """Monte Carlo connect probability from ``n_samples`` draws of ``eps``.

    Samples are generated in fixed-size chunks, each from its own substream
    keyed by the chunk index, so the estimate does not depend on ``workers``.
    """
    if n_samples < 1:
        raise UsageError(f"n_samples must be >= 1, got {n_samples}")
    x = np.asarray(x_tilde, dtype=float)
    offset = math.sqrt(gamma_hat) * sigma_z
    det = np.array([cone.a_minus @ x, cone.a_plus @ x])
    dirs = np.column_stack([cone.d_minus @ x, cone.d_plus @ x])
    n_chunks = -(-n_samples // MC_CHUNK)

    def count(j):
        size = min(MC_CHUNK, n_samples - j * MC_CHUNK)
        eps = substream(seed, j).standard_normal((size, x.size))
        vals = det + eps @ dirs
        return int(np.count_nonzero(np.all(vals >= offset - CI_TOL, axis=1)))

    if workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(workers) as pool:
            hits = sum(pool.map(count, range(n_chunks)))
    else:
        hits = sum(count(j) for j in range(n_chunks))
    return ProbEstimate.from_count(hits, n_samples)
