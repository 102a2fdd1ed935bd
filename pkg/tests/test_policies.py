import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from coptimist.envs import Trajectory
from coptimist.policies import (
    GaussianHyperpolicy, IndexedFamily, LinearDeterministicPolicy, LinearFamily,
    TabularIndexedPolicy, UnsupportedOperation, action_log_prob, hyper_logpdf,
    mountaincar_features, sample_theta, sigmoid_link, trajectory_log_density,
)


def test_logpdf_standard_normal_mode():
    h = GaussianHyperpolicy((0.0,), (1.0,))
    assert hyper_logpdf(h, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi))
    assert hyper_logpdf(h, [0.0]) == pytest.approx(-0.9189385332046727, abs=1e-15)


def test_logpdf_mode_value():
    h = GaussianHyperpolicy((0.3, -2.0), (0.15, 3.0))
    expect = -0.5 * (2 * math.log(2 * math.pi) + math.log(0.15 * 3.0))
    assert hyper_logpdf(h, h.mean) == pytest.approx(expect)


def test_logpdf_matches_multivariate_formula():
    xi = np.array([0.2, 5.0])
    h = GaussianHyperpolicy(tuple(xi), (0.15, 3.0))
    theta = xi + np.array([0.1, 1.0])
    ref = stats.multivariate_normal(xi, np.diag([0.15, 3.0])).logpdf(theta)
    assert hyper_logpdf(h, theta) == pytest.approx(ref, rel=1e-13)
    batch = hyper_logpdf(h, np.vstack([theta, xi]))
    assert batch.shape == (2,) and batch[0] == pytest.approx(ref, rel=1e-13)


def test_logpdf_dimension_mismatch():
    h = GaussianHyperpolicy((0.0, 0.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        hyper_logpdf(h, [0.0, 0.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=3),
       st.floats(0.05, 4.0), st.floats(1e-4, 1.0), st.integers(0, 2))
def test_logpdf_maximised_at_mean(mean, var, step, axis):
    h = GaussianHyperpolicy(tuple(mean), (var,) * len(mean))
    top = hyper_logpdf(h, h.mean)
    for sign in (-1, 1):
        t = np.array(h.mean)
        t[axis % h.dim] += sign * step
        assert hyper_logpdf(h, t) < top


def test_hyperpolicy_validation():
    with pytest.raises(ValueError):
        GaussianHyperpolicy((0.0,), (0.0,))
    with pytest.raises(ValueError):
        GaussianHyperpolicy((0.0, 1.0), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        GaussianHyperpolicy((2.0,), (1.0,), box=((-1.0, 1.0),))


def test_sample_theta_moments_and_determinism():
    h = GaussianHyperpolicy((1.0, -3.0), (0.15, 3.0))
    rng = np.random.default_rng(4)
    draws = np.array([sample_theta(h, rng) for _ in range(100_000)])
    assert np.all(np.abs(draws[:10_000].mean(0) - h.mu) <= 3 * np.sqrt(h.var / 10_000))
    cov = np.cov(draws.T)
    assert np.allclose(np.diag(cov), h.var, rtol=0.05)
    assert abs(cov[0, 1]) < 0.05 * math.sqrt(h.var.prod())
    a = sample_theta(h, np.random.default_rng(9))
    b = sample_theta(h, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_sample_theta_small_covariance_concentrates():
    h = GaussianHyperpolicy((0.5,), (1e-12,))
    rng = np.random.default_rng(0)
    assert all(abs(sample_theta(h, rng)[0] - 0.5) < 1e-4 for _ in range(100))


def test_sigmoid_values():
    assert sigmoid_link(0.0) == 0.5
    assert sigmoid_link(1.0) == pytest.approx(float(1 / (1 + mpmath.e ** -1)), abs=1e-15)
    assert sigmoid_link(1.0) == pytest.approx(0.7310585786300049, abs=1e-15)
    assert sigmoid_link(800.0) == 1.0 and sigmoid_link(-800.0) == 0.0


@given(st.floats(-30, 30), st.floats(1e-3, 5))
def test_sigmoid_monotone_and_bounded(x, dx):
    # strict bounds hold until the result rounds to 1.0 in double precision
    a, b = sigmoid_link(x), sigmoid_link(x + dx)
    assert 0.0 < a < 1.0
    assert a < b


def test_action_log_prob_examples():
    pol = TabularIndexedPolicy((1, 0, 3), 0.4, 4)
    assert action_log_prob(pol, 0, 1) == pytest.approx(math.log(0.4))
    assert action_log_prob(pol, 0, 2) == pytest.approx(math.log(0.2))
    for s in range(3):
        assert sum(math.exp(action_log_prob(pol, s, a)) for a in range(4)) == pytest.approx(
            1.0, abs=1e-12)


def test_action_log_prob_deterministic_policy_unsupported():
    pol = LinearFamily()((0.1, 0.2))
    with pytest.raises(UnsupportedOperation):
        action_log_prob(pol, (-0.5, 0.0), 0.3)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(2, 6), st.lists(st.integers(0, 5), min_size=1, max_size=8))
def test_indexed_policy_rows_normalised(p, n_actions, ref):
    ref = [a % n_actions for a in ref]
    t = TabularIndexedPolicy(tuple(ref), p, n_actions).table()
    assert np.allclose(t.sum(-1), 1.0, atol=1e-12)
    assert np.all(t[np.arange(len(ref)), ref] == p)


def test_indexed_policy_sampling_frequencies():
    pol = TabularIndexedPolicy((2,), 0.7, 4)
    rng = np.random.default_rng(0)
    acts = np.array([pol.act(0, rng) for _ in range(20_000)])
    freq = np.bincount(acts, minlength=4) / len(acts)
    assert np.allclose(freq, pol.table()[0], atol=0.015)


def test_family_tables_match_single_policies():
    fam = IndexedFamily((0, 1, 2), 3)
    thetas = [-2.0, 0.0, 1.5]
    batch = fam.tables(thetas)
    for t, th in zip(batch, thetas):
        assert np.allclose(t, fam(th).table())


def test_trajectory_log_density():
    pol = TabularIndexedPolicy((1, 0, 3), 0.4, 4)
    one = Trajectory([0], [2], [0.0])
    assert trajectory_log_density(pol, one) == pytest.approx(action_log_prob(pol, 0, 2))
    traj = Trajectory([0, 1, 2], [1, 1, 3], [0, 0, 0])
    expect = sum(action_log_prob(pol, s, a) for s, a in zip(traj.states, traj.actions))
    assert trajectory_log_density(pol, traj) == pytest.approx(expect)
    assert trajectory_log_density(pol, traj) - trajectory_log_density(pol, traj) == 0.0


@settings(max_examples=80, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-1.2, 0.6), st.floats(-0.07, 0.07))
def test_linear_policy_within_bounds(t1, t2, p, v):
    pol = LinearDeterministicPolicy((t1, t2), mountaincar_features, (-1.0, 1.0))
    assert -1.0 <= pol.act((p, v)) <= 1.0


def test_features_rescaled_to_unit_interval():
    assert np.allclose(mountaincar_features((-1.2, -0.07)), [0, 0])
    assert np.allclose(mountaincar_features((0.6, 0.07)), [1, 1])
