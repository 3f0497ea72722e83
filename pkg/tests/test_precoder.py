import math

import numpy as np
import pytest

from conftest import feasible_scenarios, qpsk_single_user, random_scenario
from robustci import evaluation, precoder, prob, socp
from robustci.errors import ConfigError, DomainError, UsageError
from robustci.model import UserScenario, ci_margin, make_constellation


def test_build_counts_and_sizes(rng):
    sc = random_scenario(rng)
    p = precoder.build_power_min(sc, [1.0] * 4)
    assert p.n_vars == 9
    assert len(p.cones) == 9
    assert all(c.rows == 9 for c in p.cones)


def test_build_qpsk_matches_hand_problem():
    p = precoder.build_power_min(qpsk_single_user(), [0.0])
    # y = [x1, x2, t]; rows of the user cones reduce to x1 -/+ x2 - 1 >= 0
    for cone, a in zip(p.cones[1:], ([1.0, -1.0], [1.0, 1.0])):
        assert not cone.matrix[:2].any()
        np.testing.assert_allclose(cone.matrix[2], [*a, 0.0])
        np.testing.assert_allclose(cone.offset, [0.0, 0.0, -1.0])


@pytest.mark.parametrize("radii", [[1.0, 2.0], [-1.0], [math.inf]])
def test_build_rejects_bad_radii(radii):
    with pytest.raises(UsageError):
        precoder.build_power_min(qpsk_single_user(), radii)


def test_nonrobust_qpsk_power_one():
    res = precoder.solve_nonrobust(qpsk_single_user())
    assert res.optimal
    assert res.power == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(res.x, [1.0], atol=1e-6)
    assert res.power == pytest.approx(float(np.sum(np.abs(res.x) ** 2)), abs=1e-9)


def test_zero_targets_give_zero_power(rng):
    sc = random_scenario(rng).with_targets(gamma_hat=0.0)
    res = precoder.solve_nonrobust(sc)
    assert res.optimal
    assert res.power <= 1e-7


def test_power_nondecreasing_in_gamma(rng):
    sc = random_scenario(rng, err_var=0.0)
    powers = [precoder.solve_nonrobust(sc.with_targets(gamma_hat=[g, 1, 1, 1])).power
              for g in (0.5, 1.0, 2.0, 4.0, 8.0)]
    assert np.all(np.diff(powers) >= -1e-6)


def test_sphere_zero_target_equals_nonrobust(rng):
    sc = random_scenario(rng, p_hat=0.0)
    a = precoder.solve_sphere_bounding(sc)
    b = precoder.solve_nonrobust(sc)
    np.testing.assert_allclose(a.x_tilde, b.x_tilde, atol=1e-6)


def test_sphere_zero_error_equals_nonrobust(rng):
    sc = random_scenario(rng, err_var=0.0, p_hat=0.95)
    a = precoder.solve_sphere_bounding(sc)
    b = precoder.solve_nonrobust(sc)
    assert a.optimal and b.optimal
    np.testing.assert_allclose(a.x_tilde, b.x_tilde, atol=1e-6)


def test_sphere_target_one_is_domain_error(rng):
    with pytest.raises(DomainError):
        precoder.solve_sphere_bounding(random_scenario(rng), p_targets=[1.0] * 4)


def test_sphere_guarantee_and_power_ordering():
    for sc, res in feasible_scenarios(21, 25):
        nr = precoder.solve_nonrobust(sc)
        assert res.power >= nr.power - 1e-6
        for o in res.per_user:
            assert o.p_exact >= 0.9 - 1e-6
            assert o.radius_used == pytest.approx(prob.radius(0.9))


def test_power_nondecreasing_in_p_hat():
    (sc, _), = feasible_scenarios(5, 1)
    powers = [precoder.solve_sphere_bounding(sc, p_targets=[p] * 4).power
              for p in (0.0, 0.3, 0.6, 0.9)]
    assert np.all(np.diff(powers) >= -1e-6)


def test_tightening_chain_on_solutions():
    for sc, res in feasible_scenarios(8, 15):
        for u, cone in zip(sc.users, sc.cones):
            m = prob.moments(res.x_tilde, cone, u.gamma_hat, u.sigma_z)
            bound = prob.first_tighten_bound(m)
            assert bound >= u.p_hat - 1e-6
            assert prob.connect_prob_exact(m) >= bound - 1e-12


def test_homogeneity_of_feasibility():
    (sc, res), = feasible_scenarios(9, 1)
    r = [prob.radius(0.9)] * 4
    for alpha in (1.0, 1.5, 3.0):
        scaled = sc.with_targets(gamma_hat=alpha**2)
        slack = precoder.constraint_slacks(scaled, alpha * res.x_tilde, r)
        assert np.all(slack >= -1e-7 * alpha)


def test_power_linear_in_gamma():
    (sc, res), = feasible_scenarios(10, 1)
    for g in (0.1, 3.0, 100.0):
        p = precoder.solve_sphere_bounding(sc.with_targets(gamma_hat=g)).power
        assert p == pytest.approx(g * res.power, rel=1e-6)


def test_iteration_literal_sign_example():
    # p_adj = 0.9 + 0.2 * (0.95 - 0.9) = 0.91 for an over-satisfied user
    p_adj = np.clip(0.9 + 0.2 * (0.95 - 0.9), 0.0, precoder.P_ADJ_MAX)
    assert p_adj == pytest.approx(0.91)


def test_iteration_trace_first_record():
    (sc, res), = feasible_scenarios(3, 1)
    it = precoder.iterative_sphere_bounding(sc, max_iter=1)
    rec = it.trace[0]
    assert rec.l == 1
    p_act = np.array([o.p_exact for o in res.per_user])
    np.testing.assert_allclose(rec.p_act, p_act, atol=1e-9)
    np.testing.assert_allclose(rec.delta_p, p_act - 0.9, atol=1e-9)
    np.testing.assert_allclose(rec.p_hat_adj, np.clip(0.9 + 0.2 * (p_act - 0.9), 0, 1 - 1e-9),
                               atol=1e-9)


def test_iteration_stops_when_first_solve_is_within_delta():
    # QPSK single user: rho = 0 and both cones active, so p_act = 0.95^2 = 0.9025
    sc = qpsk_single_user(err_var=0.02, p_hat=0.9)
    res = precoder.iterative_sphere_bounding(sc, eta=0.2, delta=0.005)
    assert res.converged and len(res.trace) == 1
    rec = res.trace[0]
    assert rec.p_act[0] == pytest.approx(0.9025, abs=1e-6)
    assert rec.p_hat_adj[0] == pytest.approx(0.9 + 0.2 * (rec.p_act[0] - 0.9), abs=1e-12)


def test_negated_iteration_converges_near_target():
    hits = total = 0
    for sc, _ in feasible_scenarios(31, 10):
        res = precoder.iterative_sphere_bounding(sc, negate=True)
        assert res.trace
        for rec in res.trace:
            assert all(0.0 <= p < 1.0 for p in rec.p_hat_adj)
        if res.optimal:
            total += 1
            last = res.trace[-1]
            if res.converged:
                assert max(abs(d) for d in last.delta_p) <= 0.005
                hits += 1
            assert all(abs(o.p_exact - 0.9) <= 0.02 or not res.converged for o in res.per_user)
    assert total > 0 and hits / total >= 0.8


def test_iteration_settles_user_with_slack_constraints():
    # on this realization one user is over-satisfied by the others' requirements
    const = make_constellation(8)
    h = evaluation.gen_channels(4, 4, 21, seed=0)[20]
    d = evaluation.assign_symbols(const, 4, (0, 2, 20))
    sc = precoder.Scenario(tuple(UserScenario(h[i], d[i], 1.0, 1.0, 0.9, 0.02)
                                 for i in range(4)), const)
    first = precoder.solve_sphere_bounding(sc)
    slack = precoder.constraint_slacks(sc, first.x_tilde, [prob.radius(0.9)] * 4)
    free = np.all(slack > 1e-3, axis=1)
    assert free.sum() == 1
    assert first.per_user[int(np.argmax(free))].p_exact > 0.99
    res = precoder.iterative_sphere_bounding(sc, negate=True)
    assert res.converged and len(res.trace) < 50
    last = res.trace[-1]
    assert all(abs(dp) <= 0.005 for dp, f in zip(last.delta_p, free) if not f)


def test_literal_iteration_does_not_relax():
    # over-satisfied users have their targets raised, never lowered
    (sc, _), = feasible_scenarios(3, 1)
    res = precoder.iterative_sphere_bounding(sc, max_iter=5)
    first = res.trace[0]
    assert all(p >= 0.9 for p in first.p_hat_adj)


def test_iteration_with_monte_carlo_probability():
    (sc, _), = feasible_scenarios(3, 1)
    a = precoder.iterative_sphere_bounding(sc, negate=True, use_mc=True, n_mc=4000, seed=2,
                                           max_iter=5)
    b = precoder.iterative_sphere_bounding(sc, negate=True, use_mc=True, n_mc=4000, seed=2,
                                           max_iter=5)
    assert a.trace == b.trace
    exact = [o.p_exact for o in precoder.solve_sphere_bounding(sc).per_user]
    se = math.sqrt(0.1 * 0.9 / 4000)
    assert all(abs(p - e) <= 5 * se + 0.01 for p, e in zip(a.trace[0].p_act, exact))


@pytest.mark.parametrize("kw", [{"eta": 0.0}, {"delta": -1.0}, {"max_iter": 0}])
def test_iteration_parameter_validation(kw):
    with pytest.raises(ConfigError):
        precoder.iterative_sphere_bounding(qpsk_single_user(), **kw)


def test_infeasible_scenario_reports_status():
    # two users with identical channels but opposite symbols cannot both receive CI
    const = make_constellation(4)
    h = np.array([1.0 + 0j, 0.5j])
    users = tuple(UserScenario(h, d, 1.0, 1.0, 0.9, 0.02) for d in (1.0, -1.0))
    sc = precoder.Scenario(users, const)
    for res in (precoder.solve_nonrobust(sc), precoder.solve_sphere_bounding(sc),
                precoder.iterative_sphere_bounding(sc, negate=True)):
        assert res.status == socp.INFEASIBLE
        assert res.x is None and math.isnan(res.power)
    it = precoder.iterative_sphere_bounding(sc)
    assert it.trace == () and not it.converged


def test_maxmin_analytic():
    b = precoder.maxmin_snr_lower_bound(qpsk_single_user(), 4.0)
    assert b.gamma_lb == pytest.approx(4.0, rel=1e-6)
    assert 10 * math.log10(b.gamma_lb) == pytest.approx(6.0206, abs=1e-3)
    np.testing.assert_allclose(b.x, [2.0], atol=1e-5)


def test_maxmin_identity_budget():
    (sc, _), = feasible_scenarios(12, 1)
    unit = precoder.solve_sphere_bounding(sc.with_targets(gamma_hat=1.0))
    b = precoder.maxmin_snr_lower_bound(sc, unit.power)
    assert b.gamma_lb == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_allclose(b.x, unit.x, atol=1e-12)


def test_maxmin_rejects_bad_budget():
    with pytest.raises(ConfigError):
        precoder.maxmin_snr_lower_bound(qpsk_single_user(), 0.0)


def test_maxmin_result_retargets_scenario():
    (sc, _), = feasible_scenarios(13, 1)
    b = precoder.maxmin_snr_lower_bound(sc, 20.0)
    at_lb, res = precoder.maxmin_result(sc, b)
    assert all(u.gamma_hat == b.gamma_lb for u in at_lb.users)
    assert res.power == pytest.approx(20.0, rel=1e-9)
    assert all(o.p_exact >= 0.9 - 1e-6 for o in res.per_user)


def test_kkt_on_power_min_solution():
    (sc, res), = feasible_scenarios(14, 1)
    problem = precoder.build_power_min(sc, [prob.radius(0.9)] * 4)
    k = socp.kkt_residuals(problem, res.solution)
    assert k.max <= 1e-6 * (1 + res.power)


def test_nominal_ci_on_solution(rng):
    sc = random_scenario(rng, err_var=0.0)
    res = precoder.solve_nonrobust(sc)
    for u in sc.users:
        m = ci_margin(u.h_est, u.d, res.x, u.gamma_hat, u.sigma_z, sc.constellation.theta)
        assert m >= -1e-7


def test_scenario_validation():
    const = make_constellation(4)
    with pytest.raises(ConfigError):
        precoder.Scenario((), const)
    users = (UserScenario(np.ones(2), 1.0, 1.0, 1.0, 0.5, 0.0),
             UserScenario(np.ones(3), 1.0, 1.0, 1.0, 0.5, 0.0))
    with pytest.raises(ConfigError):
        precoder.Scenario(users, const)
