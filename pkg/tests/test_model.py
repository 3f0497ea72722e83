import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustci.errors import ConfigError, UsageError
from robustci.model import (
    UserScenario,
    apply_a,
    apply_b,
    ci_holds,
    ci_margin,
    cone_data,
    lift,
    make_constellation,
    real_lift,
    snr,
    structural_matrices,
    transmit_power,
    unlift,
)


def test_qpsk_constellation():
    c = make_constellation(4)
    assert c.theta == pytest.approx(math.pi / 4)
    np.testing.assert_allclose(c.symbols, [1, 1j, -1, -1j], atol=1e-15)


def test_8psk_constellation():
    c = make_constellation(8)
    assert c.theta == pytest.approx(math.pi / 8)
    assert len(c.symbols) == 8
    np.testing.assert_allclose(np.abs(c.symbols), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.angle(c.symbols[1]), math.pi / 4)


@pytest.mark.parametrize("order", [3, 2, 128, 0, 4.0, True])
def test_unsupported_orders_rejected(order):
    with pytest.raises(ConfigError):
        make_constellation(order)


def test_ci_holds_boundary_and_violation():
    theta = math.pi / 4
    assert ci_holds([1.0], 1.0, [1.0], 1.0, 1.0, theta)
    assert not ci_holds([1.0], 1.0, [1 + 1j], 1.0, 1.0, theta)


def test_ci_holds_matches_direct_formula(rng):
    theta = math.pi / 8
    for _ in range(200):
        h = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        x = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        d = np.exp(1j * 2 * theta * rng.integers(0, 8))
        g = rng.uniform(0, 2)
        s = complex(np.conj(d) * sum(hk * xk for hk, xk in zip(h, x)))
        direct = abs(s.imag) / math.tan(theta) <= s.real - math.sqrt(g) * 0.7
        assert ci_holds(h, d, x, g, 0.7, theta) == direct


def test_ci_dimension_mismatch():
    with pytest.raises(UsageError):
        ci_holds([1.0, 2.0], 1.0, [1.0], 1.0, 1.0, math.pi / 4)


def test_real_lift_examples():
    u = UserScenario([1 + 2j], 1.0, 1.0, 1.0, 0.5, 0.0)
    np.testing.assert_allclose(real_lift(u).h_tilde, [1.0, 2.0])
    u = UserScenario([1.0], 1j, 1.0, 1.0, 0.5, 0.0)
    np.testing.assert_allclose(real_lift(u).h_tilde, [0.0, -1.0])


def test_lifted_covariance_is_half_block():
    u = UserScenario(np.ones(4), 1.0, 1.0, 1.0, 0.5, 0.02 * np.eye(4))
    s = real_lift(u).sigma_tilde_sqrt
    np.testing.assert_allclose(s @ s, 0.01 * np.eye(8), atol=1e-15)


def test_non_diagonal_covariance_rejected():
    cov = np.eye(2) + 0.1
    with pytest.raises(ConfigError):
        UserScenario(np.ones(2), 1.0, 1.0, 1.0, 0.5, cov)


@pytest.mark.parametrize("kw", [
    {"sigma_z": 0.0}, {"gamma_hat": -1.0}, {"p_hat": 1.0}, {"p_hat": -0.1},
    {"d": 0.5}, {"err_cov": -0.1},
])
def test_user_scenario_validation(kw):
    args = dict(h_est=np.ones(2), d=1.0, sigma_z=1.0, gamma_hat=1.0, p_hat=0.5, err_cov=0.0)
    args.update(kw)
    with pytest.raises(ConfigError):
        UserScenario(**args)


def test_cone_data_qpsk_example():
    u = UserScenario([1.0], 1.0, 1.0, 1.0, 0.5, 0.0)
    cd = cone_data(real_lift(u), math.pi / 4)
    np.testing.assert_allclose(cd.a_minus, [1.0, -1.0])
    np.testing.assert_allclose(cd.a_plus, [1.0, 1.0])
    assert not cd.d_minus.any() and not cd.d_plus.any()


def test_cone_data_matches_dense_recomputation(rng):
    theta = math.pi / 8
    h = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    cov = rng.uniform(0.01, 0.1, 3)
    u = UserScenario(h, np.exp(1j * math.pi / 4), 1.0, 1.0, 0.5, cov)
    lifted = real_lift(u)
    cd = cone_data(lifted, theta)
    a, b = structural_matrices(3)
    s = np.diag(np.sqrt(np.concatenate([cov, cov]) / 2))
    for sign, vec, mat in ((-1, cd.a_minus, cd.d_minus), (1, cd.a_plus, cd.d_plus)):
        op = a + sign * b / math.tan(theta)
        np.testing.assert_allclose(vec, op.T @ lifted.h_tilde, atol=1e-12)
        np.testing.assert_allclose(mat, s @ op, atol=1e-12)


def test_cone_data_rejects_wide_theta():
    u = UserScenario([1.0], 1.0, 1.0, 1.0, 0.5, 0.0)
    with pytest.raises(ConfigError):
        cone_data(real_lift(u), math.pi / 2)


def test_isotropic_qpsk_cones_have_equal_spread(rng):
    u = UserScenario(rng.standard_normal(4) + 0j, 1.0, 1.0, 1.0, 0.5, 0.05)
    cd = cone_data(real_lift(u), math.pi / 4)
    for _ in range(20):
        x = rng.standard_normal(8)
        assert np.linalg.norm(cd.d_minus @ x) == pytest.approx(np.linalg.norm(cd.d_plus @ x),
                                                               abs=1e-10)


def test_structural_operators_match_matrices(rng):
    a, b = structural_matrices(3)
    v = rng.standard_normal(6)
    np.testing.assert_array_equal(apply_a(v), a @ v)
    np.testing.assert_array_equal(apply_b(v), b @ v)
    ab = a @ b
    np.testing.assert_array_equal(ab.T, -ab)
    assert abs(v @ ab @ v) < 1e-12


def test_snr_and_power():
    assert snr([1.0], [2.0], 1.0) == pytest.approx(4.0)
    assert snr([1.0, 1j], [0.0, 0.0], 1.0) == 0.0
    assert transmit_power([1.0, 1j]) == pytest.approx(2.0)
    assert transmit_power(np.zeros(3)) == 0.0


def test_snr_random_and_dimension(rng):
    h = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    x = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    assert snr(h, x, 0.5) == pytest.approx(abs(np.sum(h * x)) ** 2 / 0.25)
    with pytest.raises(UsageError):
        snr(h, x[:3], 1.0)


def test_lift_roundtrip(rng):
    x = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    np.testing.assert_array_equal(unlift(lift(x)), x)
    assert transmit_power(x) == pytest.approx(lift(x) @ lift(x))


complex_vecs = st.lists(
    st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=6
).map(lambda v: np.array([a + 1j * b for a, b in v]))


@settings(max_examples=60, deadline=None)
@given(h=complex_vecs, k=st.integers(0, 15))
def test_lift_preserves_norm(h, k):
    d = np.exp(1j * 2 * math.pi * k / 16)
    u = UserScenario(h, d, 1.0, 1.0, 0.5, 0.0)
    assert np.linalg.norm(real_lift(u).h_tilde) == pytest.approx(np.linalg.norm(h), abs=1e-10)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), order=st.sampled_from([4, 8, 16]))
def test_complex_and_lifted_conditions_agree(seed, order):
    # the CI condition on h_est + e equals the lifted cone form with the error folded in
    rng = np.random.default_rng(seed)
    m = 3
    theta = math.pi / order
    h = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    x = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    cov = rng.uniform(0.0, 0.5, m)
    d = np.exp(1j * 2 * theta * rng.integers(0, order))
    eps = rng.standard_normal(2 * m)
    u = UserScenario(h, d, 1.0, 0.3, 0.5, cov)
    cd = cone_data(real_lift(u), theta)
    x_t = lift(x)
    # e in the rotated frame is d * (Sigma~^{1/2} eps); rotate back to the channel frame
    s = np.sqrt(np.concatenate([cov, cov]) / 2.0) * eps
    e = d * unlift(s)
    complex_margin = ci_margin(h + e, d, x, 0.3, 1.0, theta)
    lhs = min(cd.a_minus @ x_t + eps @ (cd.d_minus @ x_t),
              cd.a_plus @ x_t + eps @ (cd.d_plus @ x_t)) - math.sqrt(0.3)
    if abs(complex_margin) > 1e-9:
        assert (complex_margin >= 0) == (lhs >= 0)
