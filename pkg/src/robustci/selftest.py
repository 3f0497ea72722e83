"""Analytic self-checks run by ``robustci selftest``.

Every check takes a perturbation ``eps`` that is zero in normal runs.  A
nonzero ``eps`` is injected into the check's computation (not its verdict),
so the hook exercises the same comparison path as a genuine regression.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import precoder, prob, socp
from .model import UserScenario, make_constellation

FAULT_EPS = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name:<22} error={self.error:.3e} tol={self.tol:.1e}"


def _qpsk_single_user(gamma_hat=1.0, err_var=0.0, p_hat=0.0):
    user = UserScenario(np.array([1.0 + 0j]), 1.0 + 0j, 1.0, gamma_hat, p_hat, err_var)
    return precoder.Scenario((user,), make_constellation(4))


def _random_scenario(seed=0, m=4, n=4, gamma_hat=1.0):
    rng = np.random.default_rng(seed)
    const = make_constellation(8)
    h = (rng.standard_normal((n, m)) + 1j * rng.standard_normal((n, m))) / math.sqrt(2)
    d = const.symbols[rng.integers(0, 8, n)]
    users = tuple(UserScenario(h[i], d[i], 1.0, gamma_hat, 0.9, 0.02) for i in range(n))
    return precoder.Scenario(users, const)


def check_erf_inv(eps):
    return abs(prob.erf_inv(0.9 + eps) - 1.1630871536766743), 1e-12


def check_erf_roundtrip(eps):
    ps = np.linspace(-0.999999, 0.999999, 401)
    err = max(abs(math.erf(prob.erf_inv(p)) + eps - p) for p in ps)
    return err, 1e-13


def check_radius(eps):
    return abs(prob.radius(0.9) + eps - stats.norm.ppf(0.95)), 1e-12


def check_orthant_w0(eps):
    rhos = (-0.9, -0.5, 0.0, 0.5, 0.9)
    err = max(
        abs(prob.bvn_upper(eps, eps, r) - (0.25 + math.asin(r) / (2 * math.pi))) for r in rhos
    )
    return err, 1e-8


def check_orthant_reflection(eps):
    # P{X<=h, Y<=k; rho} + P{X<=h, Y<=-k; -rho} = Phi(h)
    err = 0.0
    for h, k, r in ((0.3, -1.2, 0.7), (-2.0, 0.5, -0.95), (1.5, 1.5, 0.999)):
        s = prob.bvn_lower(h + eps, k, r) + prob.bvn_lower(h, -k, -r)
        err = max(err, abs(s - prob.norm_cdf(h)))
    return err, 1e-10


def check_socp_analytic(eps):
    sc = _qpsk_single_user(gamma_hat=(1.0 + eps) ** 2)
    res = precoder.solve_nonrobust(sc)
    return abs(res.power - 1.0), 1e-6


def check_socp_kkt(eps):
    sc = _qpsk_single_user()
    problem = precoder.build_power_min(sc, [0.0])
    sol = socp.solve(problem)
    if eps:
        sol = socp.SocpSolution(sol.status, sol.primal + eps, sol.duals, sol.objective_value,
                                sol.residuals, sol.iterations)
    return socp.kkt_residuals(problem, sol).max, 1e-8


def check_socp_infeasible(eps):
    cone = socp.ConeConstraint(np.zeros((1, 1)), np.array([-1.0 + 2e3 * eps]))
    sol = socp.solve(socp.SocpProblem(1, np.zeros(1), (cone,)))
    return (0.0 if sol.status == socp.INFEASIBLE else 1.0), 0.0


def check_homogeneity(eps):
    sc = _random_scenario(seed=0)
    p1 = precoder.solve_sphere_bounding(sc).power
    p10 = precoder.solve_sphere_bounding(sc.with_targets(gamma_hat=10.0 + eps)).power
    return abs(p10 - 10.0 * p1) / (10.0 * p1), 1e-6


def check_tightening_chain(eps):
    sc = _random_scenario(seed=4)
    res = precoder.solve_sphere_bounding(sc)
    worst = 0.0
    for u, cone in zip(sc.users, sc.cones):
        m = prob.moments(res.x_tilde * (1.0 - eps), cone, u.gamma_hat, u.sigma_z)
        exact = prob.connect_prob_exact(m)
        bound = prob.first_tighten_bound(m)
        worst = max(worst, bound - exact, (u.p_hat - 1e-6) - bound)
    return worst, 0.0


def check_mc_vs_exact(eps):
    sc = _random_scenario(seed=3)
    # the non-robust precoder leaves the probability well inside (0, 1)
    res = precoder.solve_nonrobust(sc)
    u, cone = sc.users[0], sc.cones[0]
    n = 100_000
    exact = prob.connect_prob_exact(prob.moments(res.x_tilde, cone, u.gamma_hat, u.sigma_z))
    est = prob.connect_prob_mc(res.x_tilde, cone, u.gamma_hat, u.sigma_z, n, seed=5)
    se = math.sqrt(exact * (1.0 - exact) / n)
    return abs(est.value + 20 * eps - exact) / se, 4.0


def check_maxmin_analytic(eps):
    bound = precoder.maxmin_snr_lower_bound(_qpsk_single_user(), 4.0 + eps)
    return abs(bound.gamma_lb - 4.0), 1e-6


def check_determinism(eps):
    problem = precoder.build_power_min(_random_scenario(seed=12), [1.0] * 4)
    a = socp.solve(problem).primal
    b = socp.solve(problem).primal
    return float(np.max(np.abs(a - b + eps))), 0.0


CHECKS = {
    "erf_inv_0.9": check_erf_inv,
    "erf_inv_roundtrip": check_erf_roundtrip,
    "radius_quantile": check_radius,
    "orthant_w0": check_orthant_w0,
    "orthant_reflection": check_orthant_reflection,
    "socp_analytic_qpsk": check_socp_analytic,
    "socp_kkt_residuals": check_socp_kkt,
    "socp_infeasible": check_socp_infeasible,
    "homogeneity": check_homogeneity,
    "tightening_chain": check_tightening_chain,
    "mc_vs_exact": check_mc_vs_exact,
    "maxmin_analytic": check_maxmin_analytic,
    "determinism": check_determinism,
}


def run_checks(perturb=()) -> list[CheckResult]:
    unknown = set(perturb) - set(CHECKS)
    if unknown:
        raise KeyError(f"unknown checks {sorted(unknown)}")
    out = []
    for name, fn in CHECKS.items():
        err, tol = fn(FAULT_EPS if name in perturb else 0.0)
        out.append(CheckResult(name, float(err), float(tol)))
    return out
