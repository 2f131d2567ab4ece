"""Variance-schedule tables and the closed-form noising identities."""

import numpy as np
import pytest

from diffret.errors import ConfigError, InputError
from diffret.schedule import (DiffusionSchedule, forward_noise, make_schedule,
                              predict_x0, schedule_from_descriptor)

# independently computed in extended precision (longdouble cumprod)
ABAR_1000_LINEAR = 4.035829765375682e-05


def test_linear_tables():
    s = make_schedule("linear", 1000, 1e-4, 0.02)
    assert s.betas[0] == pytest.approx(1e-4)
    assert s.betas[-1] == pytest.approx(0.02)
    assert s.alpha_bars[-1] == pytest.approx(ABAR_1000_LINEAR, rel=1e-12)
    assert s.alpha_bar_prev[0] == 1.0
    np.testing.assert_allclose(s.alpha_bar_prev[1:], s.alpha_bars[:-1])


def test_monotonic_and_bounded():
    for kind in ("linear", "cosine"):
        s = make_schedule(kind, 200, 1e-4, 0.05)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all(np.diff(s.lambdas) < 0)
        assert np.all((s.betas > 0) & (s.betas < 1))
        assert 0 < s.alpha_bars[-1] < s.alpha_bars[0] < 1


def test_sigma_one_is_zero_both_kinds():
    for sigma_kind in ("posterior", "beta"):
        s = make_schedule("linear", 50, 1e-4, 0.1, sigma_kind=sigma_kind)
        assert s.sigmas[0] == 0.0
        assert np.all(s.sigmas[1:] > 0)


def test_posterior_variance_formula():
    s = make_schedule("linear", 50, 1e-4, 0.1)
    n = 10
    expected = np.sqrt((1 - s.alpha_bar_prev[n - 1])
                       / (1 - s.alpha_bars[n - 1]) * s.betas[n - 1])
    assert s.sigmas[n - 1] == pytest.approx(expected)


def test_beta_sigma_option():
    s = make_schedule("linear", 50, 1e-4, 0.1, sigma_kind="beta")
    assert s.sigmas[4] == pytest.approx(np.sqrt(s.betas[4]))


def test_lambda_is_half_log_snr():
    s = make_schedule("linear", 100, 1e-4, 0.2)
    n = 37
    ab = s.alpha_bars[n - 1]
    assert s.lambdas[n - 1] == pytest.approx(0.5 * np.log(ab / (1 - ab)))


def test_closed_form_matches_iterative_chain():
    """Table path vs stepwise noising, shared per-step draws."""
    s = make_schedule("linear", 10, 1e-3, 0.05)
    rng = np.random.default_rng(42)
    for _ in range(100):
        z0 = rng.standard_normal(16)
        steps = rng.standard_normal((10, 16))
        z = z0
        for n in range(1, 11):
            z = np.sqrt(s.alphas[n - 1]) * z \
                + np.sqrt(s.betas[n - 1]) * steps[n - 1]
        # the same per-step draws collapse to one effective eps whose
        # weights follow the product formula; the table path must agree
        weights = np.sqrt(s.alpha_bars[-1] / s.alpha_bars) \
            * np.sqrt(s.betas)
        eps_eff = (weights[:, None] * steps).sum(axis=0) \
            / np.sqrt(1 - s.alpha_bars[-1])
        direct = forward_noise(s, z0, 10, eps_eff)
        np.testing.assert_allclose(direct, z, atol=1e-6)


def test_forward_noise_broadcast_n():
    s = make_schedule("linear", 100, 1e-4, 0.2)
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal((4, 8))
    eps = rng.standard_normal((4, 8))
    n = np.array([1, 10, 50, 100])
    out = forward_noise(s, z0, n, eps)
    for i in range(4):
        np.testing.assert_array_equal(out[i],
                                      forward_noise(s, z0[i], n[i], eps[i]))


def test_predict_x0_inverts_forward_noise():
    s = make_schedule("linear", 100, 1e-4, 0.2)
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal((8, 16))
    eps = rng.standard_normal((8, 16))
    n = rng.integers(1, 101, 8)
    zn = forward_noise(s, z0, n, eps)
    np.testing.assert_allclose(predict_x0(s, zn, n, eps), z0, atol=1e-10)


def test_descriptor_round_trip():
    s = make_schedule("cosine", 64, 1e-4, 0.3, sigma_kind="beta")
    s2 = schedule_from_descriptor(s.descriptor())
    np.testing.assert_array_equal(s.betas, s2.betas)
    np.testing.assert_array_equal(s.sigmas, s2.sigmas)


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        make_schedule("linear", 0)
    with pytest.raises(ConfigError):
        make_schedule("linear", 10, 0.5, 0.1)
    with pytest.raises(ConfigError):
        make_schedule("spline", 10)
    with pytest.raises(ConfigError):
        make_schedule("linear", 10, sigma_kind="ode")


def test_timestep_range_checked():
    s = make_schedule("linear", 10, 1e-3, 0.05)
    z = np.zeros(4)
    with pytest.raises(InputError):
        forward_noise(s, z, 0, z)
    with pytest.raises(InputError):
        forward_noise(s, z, 11, z)
    with pytest.raises(InputError):
        predict_x0(s, z, np.array([3, 12]), z)


def test_schedule_immutable():
    s = make_schedule("linear", 10, 1e-3, 0.05)
    assert isinstance(s, DiffusionSchedule)
    with pytest.raises(AttributeError):
        s.N = 20
