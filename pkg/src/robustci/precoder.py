"""CI power-minimizing precoders: non-robust, sphere bounding, iterative
sphere bounding, and the max-min SNR lower bound.

Every scheme solves the same conic program over ``y = [x_tilde; t]``::

    minimize t
    s.t.  ||x_tilde|| <= t
          r_i ||d_k,i x_tilde|| <= a_k,i @ x_tilde - sqrt(gamma_i) sigma_i,
          k in {-, +}, i = 1..N

and differs only in the radii ``r_i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from . import prob, socp
from .errors import ConfigError, DomainError, UsageError
from .model import ConeData, PskConstellation, UserScenario, cone_data, real_lift, unlift

P_ADJ_MAX = 1.0 - 1e-9
# relative slack above which a constraint counts as inactive; active ones sit
# within solver tolerance of zero
INACTIVE_SLACK = 1e-4


@dataclass(frozen=True)
class Scenario:
    users: tuple[UserScenario, ...]
    constellation: PskConstellation

    def __post_init__(self):
        users = tuple(self.users)
        if not users:
            raise ConfigError("a scenario needs at least one user")
        m = users[0].m
        if any(u.m != m for u in users):
            raise ConfigError("all users must share the antenna count M")
        object.__setattr__(self, "users", users)

    @property
    def m_antennas(self) -> int:
        return self.users[0].m

    @property
    def n_users(self) -> int:
        return len(self.users)

    @cached_property
    def cones(self) -> tuple[ConeData, ...]:
        theta = self.constellation.theta
        return tuple(cone_data(real_lift(u), theta) for u in self.users)

    def with_targets(self, gamma_hat=None, p_hat=None) -> "Scenario":
        """Copy with every user's SNR and/or probability target replaced.

        Scalars apply to all users; sequences are per user.
        """
        n = self.n_users
        gs = [gamma_hat] * n if np.ndim(gamma_hat) == 0 else list(gamma_hat)
        ps = [p_hat] * n if np.ndim(p_hat) == 0 else list(p_hat)
        users = tuple(u.with_targets(g, p) for u, g, p in zip(self.users, gs, ps))
        new = Scenario(users, self.constellation)
        if "cones" in self.__dict__:
            # cone data does not depend on the targets
            new.__dict__["cones"] = self.cones
        return new


@dataclass(frozen=True)
class UserOutcome:
    p_exact: float
    p_target_used: float
    radius_used: float


@dataclass(frozen=True)
class IterationRecord:
    l: int
    p_act: tuple[float, ...]
    delta_p: tuple[float, ...]
    p_hat_adj: tuple[float, ...]


@dataclass(frozen=True)
class PrecodeResult:
    x_tilde: np.ndarray | None
    x: np.ndarray | None
    power: float
    status: str
    per_user: tuple[UserOutcome, ...]
    trace: tuple[IterationRecord, ...] = ()
    solver_iterations: int = 0
    converged: bool = True
    solution: socp.SocpSolution | None = field(default=None, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == socp.OPTIMAL


def build_power_min(scenario: Scenario, radii) -> socp.SocpProblem:
    radii = np.asarray(radii, dtype=float).reshape(-1)
    if radii.size != scenario.n_users:
        raise UsageError(f"expected {scenario.n_users} radii, got {radii.size}")
    if np.any(radii < 0) or not np.all(np.isfinite(radii)):
        raise UsageError("radii must be finite and nonnegative")
    n2 = 2 * scenario.m_antennas
    n_vars = n2 + 1
    objective = np.zeros(n_vars)
    objective[-1] = 1.0
    cones = [socp.ConeConstraint(np.eye(n_vars), np.zeros(n_vars))]
    for user, cone, r in zip(scenario.users, scenario.cones, radii):
        offset = np.zeros(n_vars)
        offset[-1] = -math.sqrt(user.gamma_hat) * user.sigma_z
        for a, d in ((cone.a_minus, cone.d_minus), (cone.a_plus, cone.d_plus)):
            mat = np.zeros((n_vars, n_vars))
            mat[:n2, :n2] = r * d
            mat[n2, :n2] = a
            cones.append(socp.ConeConstraint(mat, offset))
    return socp.SocpProblem(n_vars, objective, tuple(cones))


def exact_connect_probs(scenario: Scenario, x_tilde) -> np.ndarray:
    return np.array([
        prob.connect_prob_exact(prob.moments(x_tilde, cone, u.gamma_hat, u.sigma_z))
        for u, cone in zip(scenario.users, scenario.cones)
    ])


def mc_connect_probs(scenario: Scenario, x_tilde, n_samples: int, seed) -> np.ndarray:
    base = seed if isinstance(seed, tuple) else (seed,)
    return np.array([
        prob.connect_prob_mc(x_tilde, cone, u.gamma_hat, u.sigma_z, n_samples, base + (i,)).value
        for i, (u, cone) in enumerate(zip(scenario.users, scenario.cones))
    ])


def _solve_with_radii(scenario: Scenario, radii, p_used, tol, max_iter) -> PrecodeResult:
    problem = build_power_min(scenario, radii)
    sol = socp.solve(problem, tol=tol, max_iter=max_iter)
    if sol.status != socp.OPTIMAL:
        per_user = tuple(UserOutcome(math.nan, float(p), float(r)) for p, r in zip(p_used, radii))
        return PrecodeResult(None, None, math.nan, sol.status, per_user,
                             solver_iterations=sol.iterations, solution=sol)
    x_tilde = sol.primal[:-1].copy()
    p_exact = exact_connect_probs(scenario, x_tilde)
    per_user = tuple(
        UserOutcome(float(pe), float(p), float(r)) for pe, p, r in zip(p_exact, p_used, radii)
    )
    return PrecodeResult(
        x_tilde,
        unlift(x_tilde),
        float(x_tilde @ x_tilde),
        sol.status,
        per_user,
        solver_iterations=sol.iterations,
        solution=sol,
    )


def solve_nonrobust(scenario: Scenario, tol: float = socp.DEFAULT_TOL,
                    max_iter: int = socp.DEFAULT_MAX_ITER) -> PrecodeResult:
    """CI power minimization on the estimated channels, ignoring the error."""
    n = scenario.n_users
    return _solve_with_radii(scenario, np.zeros(n), np.zeros(n), tol, max_iter)


def solve_sphere_bounding(scenario: Scenario, p_targets=None, tol: float = socp.DEFAULT_TOL,
                          max_iter: int = socp.DEFAULT_MAX_ITER) -> PrecodeResult:
    """Power minimization with every user's error confined to a sphere of
    radius ``sqrt(2) erf_inv(p_hat)``.

    ``p_targets`` overrides the users' own ``p_hat`` values (used by the
    relaxation iteration).
    """
    if p_targets is None:
        p_targets = [u.p_hat for u in scenario.users]
    p_targets = np.asarray(p_targets, dtype=float)
    for p in p_targets:
        if not 0.0 <= p < 1.0:
            raise DomainError(f"probability target must lie in [0, 1), got {p}")
    radii = np.array([prob.radius(p) for p in p_targets])
    return _solve_with_radii(scenario, radii, p_targets, tol, max_iter)


def iterative_sphere_bounding(scenario: Scenario, eta: float = 0.2, delta: float = 0.005,
                              max_iter: int = 50, *, negate: bool = False,
                              use_mc: bool = False, n_mc: int = 10_000, seed=0,
                              tol: float = socp.DEFAULT_TOL) -> PrecodeResult:
    """Relaxation iteration on the per-user probability targets.

    Each round solves the sphere-bounding problem at the adjusted targets,
    measures the achieved connect probability ``p_act`` and updates

        dp = p_act - p_hat
        p_adj <- clip(p_adj + eta * dp, 0, 1 - 1e-9)

    until ``|dp| <= delta`` for every user.  ``negate=True`` flips the sign
    of the update (``p_adj - eta * dp``), which lowers the target of an
    over-satisfied user.

    A user whose two constraints are both slack at the optimum is
    over-satisfied by the requirements of the others; its own target does
    not move the precoder, so it counts as settled whatever its ``dp``.
    """
    if not eta > 0:
        raise ConfigError(f"eta must be > 0, got {eta}")
    if not delta > 0:
        raise ConfigError(f"delta must be > 0, got {delta}")
    if max_iter < 1:
        raise ConfigError(f"max_iter must be >= 1, got {max_iter}")
    p_hat = np.array([u.p_hat for u in scenario.users])
    p_adj = p_hat.copy()
    sign = -1.0 if negate else 1.0
    trace = []
    total_iters = 0
    result = None
    for l in range(1, max_iter + 1):
        result = solve_sphere_bounding(scenario, p_adj, tol=tol)
        total_iters += result.solver_iterations
        if not result.optimal:
            return replace(result, trace=tuple(trace), solver_iterations=total_iters,
                           converged=False)
        if use_mc:
            base = seed if isinstance(seed, tuple) else (seed,)
            p_act = mc_connect_probs(scenario, result.x_tilde, n_mc, base + (l,))
        else:
            p_act = np.array([o.p_exact for o in result.per_user])
        dp = p_act - p_hat
        slack = constraint_slacks(scenario, result.x_tilde,
                                  [o.radius_used for o in result.per_user])
        free = (dp > 0) & np.all(slack > INACTIVE_SLACK * (1.0 + _offsets(scenario))[:, None],
                                 axis=1)
        p_adj = np.clip(p_adj + sign * eta * dp, 0.0, P_ADJ_MAX)
        trace.append(IterationRecord(l, tuple(p_act), tuple(dp), tuple(p_adj)))
        if np.all((np.abs(dp) <= delta) | free):
            return replace(result, trace=tuple(trace), solver_iterations=total_iters,
                           converged=True)
    return replace(result, trace=tuple(trace), solver_iterations=total_iters, converged=False)


@dataclass(frozen=True)
class MaxMinBound:
    gamma_lb: float
    x: np.ndarray | None
    x_tilde: np.ndarray | None
    unit_power: float
    status: str


def maxmin_snr_lower_bound(scenario: Scenario, p_budget: float,
                           tol: float = socp.DEFAULT_TOL) -> MaxMinBound:
    """Lower bound on the tightened max-min SNR under a power budget.

    The sphere-bounding constraints are homogeneous in ``(x_tilde,
    sqrt(gamma))``, so the minimal power at a common target ``gamma`` is
    ``gamma * P(1)``.  Solving once at unit targets therefore yields the
    achievable common SNR ``p_budget / P(1)`` and a precoder attaining it.
    """
    if not p_budget > 0:
        raise ConfigError(f"p_budget must be > 0, got {p_budget}")
    unit = solve_sphere_bounding(scenario.with_targets(gamma_hat=1.0), tol=tol)
    if not unit.optimal:
        return MaxMinBound(math.nan, None, None, math.nan, unit.status)
    scale = math.sqrt(p_budget / unit.power)
    return MaxMinBound(
        p_budget / unit.power,
        unit.x * scale,
        unit.x_tilde * scale,
        unit.power,
        unit.status,
    )


def maxmin_result(scenario: Scenario, bound: MaxMinBound) -> tuple[Scenario, PrecodeResult]:
    """The bound's precoder as a result for the scenario retargeted to ``gamma_lb``."""
    if bound.status != socp.OPTIMAL:
        return scenario, PrecodeResult(None, None, math.nan, bound.status, ())
    at_lb = scenario.with_targets(gamma_hat=bound.gamma_lb)
    p_exact = exact_connect_probs(at_lb, bound.x_tilde)
    per_user = tuple(
        UserOutcome(float(p), u.p_hat, prob.radius(u.p_hat)) for p, u in zip(p_exact, at_lb.users)
    )
    return at_lb, PrecodeResult(bound.x_tilde, bound.x, float(bound.x_tilde @ bound.x_tilde),
                                bound.status, per_user)


def _offsets(scenario: Scenario) -> np.ndarray:
    return np.array([math.sqrt(u.gamma_hat) * u.sigma_z for u in scenario.users])


def constraint_slacks(scenario: Scenario, x_tilde, radii) -> np.ndarray:
    """``a_k @ x - sqrt(gamma) sigma - r ||d_k x||`` per user and cone (N x 2)."""
    out = []
    for u, cone, r in zip(scenario.users, scenario.cones, radii):
        off = math.sqrt(u.gamma_hat) * u.sigma_z
        out.append([
            cone.a_minus @ x_tilde - off - r * np.linalg.norm(cone.d_minus @ x_tilde),
            cone.a_plus @ x_tilde - off - r * np.linalg.norm(cone.d_plus @ x_tilde),
        ])
    return np.array(out)
