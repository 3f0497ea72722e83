"""MISO downlink signal model, PSK constellations and the CI condition.

Complex quantities are lifted to real vectors as ``[Re(.); Im(.)]``.  The
structural operators

    A = [I, 0; 0, -I]      B = [0, I; I, 0]

are never built explicitly in the hot paths; :func:`apply_a` and
:func:`apply_b` implement them as sign flips and block swaps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError

SUPPORTED_ORDERS = (4, 8, 16, 32, 64)

# Absolute slack when testing a realized CI condition.  Solved precoders
# meet active constraints only to solver tolerance, and without channel
# error the realized margin is exactly that residual.
CI_TOL = 1e-6


@dataclass(frozen=True)
class PskConstellation:
    mod_order: int
    theta: float
    symbols: np.ndarray = field(repr=False)

    def index_of(self, d: complex) -> int:
        return int(np.argmin(np.abs(self.symbols - d)))


def make_constellation(mod_order: int) -> PskConstellation:
    """Unit-modulus M-PSK constellation with ``theta = pi / mod_order``.

    BPSK is rejected: the CI condition divides by ``tan(theta)``, which is
    undefined at ``theta = pi/2``.
    """
    if isinstance(mod_order, bool) or not isinstance(mod_order, (int, np.integer)):
        raise ConfigError(f"mod_order must be an integer, got {mod_order!r}")
    if mod_order not in SUPPORTED_ORDERS:
        raise ConfigError(
            f"unsupported mod_order {mod_order}; expected one of {SUPPORTED_ORDERS}"
        )
    theta = np.pi / mod_order
    symbols = np.exp(1j * 2.0 * theta * np.arange(mod_order))
    symbols.setflags(write=False)
    return PskConstellation(int(mod_order), float(theta), symbols)


@dataclass(frozen=True)
class UserScenario:
    """One user's estimated channel, symbol, noise level and targets.

    ``err_cov`` is the diagonal of the complex channel-error covariance.  A
    full square matrix is accepted only if it is diagonal.
    """

    h_est: np.ndarray
    d: complex
    sigma_z: float
    gamma_hat: float
    p_hat: float
    err_cov: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h_est, dtype=complex).reshape(-1)
        cov = np.asarray(self.err_cov, dtype=float)
        if cov.ndim == 0:
            cov = np.full(h.size, float(cov))
        elif cov.ndim == 2:
            if cov.shape != (h.size, h.size):
                raise ConfigError(f"err_cov shape {cov.shape} does not match M={h.size}")
            if np.any(cov - np.diag(np.diag(cov))):
                raise ConfigError("err_cov must be diagonal")
            cov = np.diag(cov).copy()
        if cov.shape != (h.size,):
            raise ConfigError(f"err_cov length {cov.size} does not match M={h.size}")
        if np.any(cov < 0) or not np.all(np.isfinite(cov)):
            raise ConfigError("err_cov entries must be finite and nonnegative")
        if not self.sigma_z > 0:
            raise ConfigError(f"sigma_z must be > 0, got {self.sigma_z}")
        if not self.gamma_hat >= 0:
            raise ConfigError(f"gamma_hat must be >= 0, got {self.gamma_hat}")
        if not 0 <= self.p_hat < 1:
            raise ConfigError(f"p_hat must lie in [0, 1), got {self.p_hat}")
        if abs(abs(complex(self.d)) - 1.0) > 1e-12:
            raise ConfigError(f"data symbol must have unit modulus, got |d|={abs(self.d)}")
        h.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "h_est", h)
        object.__setattr__(self, "err_cov", cov)
        object.__setattr__(self, "d", complex(self.d))
        object.__setattr__(self, "sigma_z", float(self.sigma_z))
        object.__setattr__(self, "gamma_hat", float(self.gamma_hat))
        object.__setattr__(self, "p_hat", float(self.p_hat))

    @property
    def m(self) -> int:
        return self.h_est.size

    def with_targets(self, gamma_hat=None, p_hat=None) -> "UserScenario":
        return UserScenario(
            self.h_est,
            self.d,
            self.sigma_z,
            self.gamma_hat if gamma_hat is None else gamma_hat,
            self.p_hat if p_hat is None else p_hat,
            self.err_cov,
        )


@dataclass(frozen=True)
class LiftedChannel:
    h_tilde: np.ndarray
    # diagonal of the 2M x 2M square-root covariance
    sigma_sqrt_diag: np.ndarray

    @property
    def sigma_tilde_sqrt(self) -> np.ndarray:
        return np.diag(self.sigma_sqrt_diag)


@dataclass(frozen=True)
class ConeData:
    """Deterministic directions ``a_minus, a_plus`` and stochastic maps
    ``d_minus, d_plus``; with ``eps`` standard normal the lifted CI
    condition is ``a_k @ x + eps @ (d_k @ x) >= sqrt(gamma_hat) * sigma_z``
    for both ``k``."""

    a_minus: np.ndarray
    a_plus: np.ndarray
    d_minus: np.ndarray
    d_plus: np.ndarray


def lift(v) -> np.ndarray:
    v = np.asarray(v, dtype=complex).reshape(-1)
    return np.concatenate([v.real, v.imag])


def unlift(v_tilde) -> np.ndarray:
    v_tilde = np.asarray(v_tilde, dtype=float)
    m = v_tilde.size // 2
    return v_tilde[:m] + 1j * v_tilde[m:]


def apply_a(v: np.ndarray) -> np.ndarray:
    m = v.shape[0] // 2
    return np.concatenate([v[:m], -v[m:]])


def apply_b(v: np.ndarray) -> np.ndarray:
    m = v.shape[0] // 2
    return np.concatenate([v[m:], v[:m]])


def structural_matrices(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``A`` and ``B`` for tests and debugging."""
    eye, zero = np.eye(m), np.zeros((m, m))
    return np.block([[eye, zero], [zero, -eye]]), np.block([[zero, eye], [eye, zero]])


def real_lift(scenario: UserScenario) -> LiftedChannel:
    g = np.conj(scenario.d) * scenario.h_est
    std = np.sqrt(scenario.err_cov / 2.0)
    return LiftedChannel(lift(g), np.concatenate([std, std]))


def _check_theta(theta: float) -> None:
    if not 0 < theta <= np.pi / 4 + 1e-15:
        raise ConfigError(f"theta must lie in (0, pi/4], got {theta}")


def cone_data(lifted: LiftedChannel, theta: float) -> ConeData:
    _check_theta(theta)
    cot = 1.0 / np.tan(theta)
    h = lifted.h_tilde
    # A and B are symmetric, so (A -/+ B cot)^T h = A h -/+ cot B h
    ah, bh = apply_a(h), apply_b(h)
    a_minus = ah - cot * bh
    a_plus = ah + cot * bh
    m = h.size // 2
    eye = np.eye(m)
    s = lifted.sigma_sqrt_diag[:, None]
    # A -/+ cot*B = [I, -/+cot I; -/+cot I, -I]
    d_minus = s * np.block([[eye, -cot * eye], [-cot * eye, -eye]])
    d_plus = s * np.block([[eye, cot * eye], [cot * eye, -eye]])
    return ConeData(a_minus, a_plus, d_minus, d_plus)


def _ci_lhs_rhs(h, d, x):
    h = np.asarray(h, dtype=complex)
    x = np.asarray(x, dtype=complex).reshape(-1)
    if h.shape[-1] != x.size:
        raise UsageError(f"dimension mismatch: h has {h.shape[-1]} entries, x has {x.size}")
    return np.conj(d) * (h @ x)


def ci_margin(h, d, x, gamma_hat, sigma_z, theta):
    """Signed slack of the CI condition; nonnegative iff CI holds.

    ``h`` may carry leading batch dimensions.
    """
    if gamma_hat < 0:
        raise UsageError(f"gamma_hat must be >= 0, got {gamma_hat}")
    s = _ci_lhs_rhs(h, d, x)
    return s.real - np.sqrt(gamma_hat) * sigma_z - np.abs(s.imag) / np.tan(theta)


def ci_holds(h, d, x, gamma_hat, sigma_z, theta, slack: float = 0.0):
    """True iff ``|Im(d* h^T x)| / tan(theta) <= Re(d* h^T x) - sqrt(gamma_hat) sigma_z``."""
    return ci_margin(h, d, x, gamma_hat, sigma_z, theta) >= -slack


def snr(h, x, sigma_z) -> float:
    h = np.asarray(h, dtype=complex).reshape(-1)
    x = np.asarray(x, dtype=complex).reshape(-1)
    if h.size != x.size:
        raise UsageError(f"dimension mismatch: h has {h.size} entries, x has {x.size}")
    return float(abs(h @ x) ** 2 / sigma_z**2)


def transmit_power(x) -> float:
    x = np.asarray(x)
    return float(np.vdot(x, x).real)
