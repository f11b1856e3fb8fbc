import logging

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.stats import multivariate_normal

from fedspace.exceptions import DegenerateComponentError, ModelEvaluationError
from fedspace.gmm import (
    GaussianMixtureModel,
    GmmTheta,
    generate_synthetic,
    gmm_tmap,
    log_partition,
    natural_parameter,
    responsibilities,
    statistic_rows,
)


def test_single_component_responsibility():
    theta = GmmTheta(np.array([1.0]), np.zeros((1, 2)), np.eye(2))
    assert np.array_equal(responsibilities(theta, np.array([3.0, -1.0])), [1.0])


def test_symmetric_point_half_half():
    theta = GmmTheta(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.0]]), np.eye(2))
    assert np.allclose(responsibilities(theta, np.array([0.0, 3.0])), [0.5, 0.5], atol=1e-15)


def test_responsibility_matches_density_quotient():
    theta = GmmTheta(np.array([0.5, 0.5]), np.array([[-1.0], [1.0]]), np.array([[1.0]]))
    d1 = 0.5 * multivariate_normal(-1.0, 1.0).pdf(0.5)
    d2 = 0.5 * multivariate_normal(1.0, 1.0).pdf(0.5)
    rho = responsibilities(theta, np.array([0.5]))
    assert rho[0] == pytest.approx(d1 / (d1 + d2), rel=1e-13)
    assert rho[0] == pytest.approx(1 / (1 + np.exp(1.0)), rel=1e-13)


def test_responsibilities_sum_to_one_far_away():
    theta = GmmTheta(np.array([0.3, 0.7]), np.array([[0.0, 0.0], [1.0, 1.0]]), 1e-2 * np.eye(2))
    y = np.random.default_rng(0).standard_normal((50, 2)) * 1e3
    rho = responsibilities(theta, y)
    assert np.all(np.isfinite(rho))
    assert np.allclose(rho.sum(axis=1), 1.0, atol=1e-15)


def test_nan_input_rejected():
    theta = GmmTheta(np.array([1.0]), np.zeros((1, 1)), np.eye(1))
    with pytest.raises(ValueError):
        responsibilities(theta, np.array([np.nan]))


def test_tmap_uniform_symmetric():
    data = np.array([[-1.0], [1.0]])
    M2 = data.T @ data / 2
    s = np.array([0.5, 0.5, 0.0, 0.0])
    theta = gmm_tmap(s, M2, 2)
    assert np.allclose(theta.weights, [0.5, 0.5])


def test_tmap_degenerate_covariance_floor(caplog):
    s = np.array([0.5, 0.5, -0.5, 0.5])
    with caplog.at_level(logging.INFO, logger="fedspace.gmm"):
        theta = gmm_tmap(s, np.array([[1.0]]), 2)
    assert np.allclose(theta.weights, [0.5, 0.5])
    assert np.allclose(theta.means.ravel(), [-1.0, 1.0])
    assert theta.cov[0, 0] == pytest.approx(1e-8, rel=1e-6)
    assert "floor" in caplog.text


def test_tmap_vanishing_weight_raises():
    with pytest.raises(DegenerateComponentError):
        gmm_tmap(np.array([1.0, 0.0, 0.3, 0.0]), np.array([[1.0]]), 2)


def test_non_pd_theta_raises():
    with pytest.raises(ModelEvaluationError):
        GmmTheta(np.array([1.0]), np.zeros((1, 2)), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_fixed_covariance_untouched(small_gmm, small_s0):
    cov = np.array([[0.9, 0.1], [0.1, 1.1]])
    model = GaussianMixtureModel(small_gmm.data, 2, covariance=cov)
    s = small_s0
    for _ in range(5):
        theta = model.tmap(s)
        assert np.array_equal(theta.cov, cov)
        s = np.mean(model.sbar_workers(theta), axis=0)


def _q_function(s, M2, theta):
    return -np.dot(s, natural_parameter(theta)) + log_partition(theta, M2)


def _unpack(vec, L, p):
    logits = np.concatenate([[0.0], vec[: L - 1]])
    w = np.exp(logits - logits.max())
    w /= w.sum()
    mu = vec[L - 1 : L - 1 + L * p].reshape(L, p)
    a, b, c = vec[L - 1 + L * p :]
    chol = np.array([[np.exp(a), 0.0], [b, np.exp(c)]])
    return GmmTheta(w, mu, chol @ chol.T)


def _random_instance(rng):
    y = rng.standard_normal((40, 2)) + rng.choice([-2.0, 2.0], size=(40, 1))
    theta = GmmTheta(np.array([0.5, 0.5]), np.array([[-1.0, 0.0], [1.0, 0.0]]), np.eye(2))
    s = statistic_rows(theta, y).mean(axis=0)
    return s, y.T @ y / len(y)


@pytest.mark.parametrize("seed", range(20))
def test_tmap_matches_numerical_minimiser(seed):
    rng = np.random.default_rng(seed)
    s, M2 = _random_instance(rng)
    closed = gmm_tmap(s, M2, 2)
    L, p = 2, 2
    # start away from the optimum
    x0 = np.concatenate([[0.3], closed.means.ravel() + 0.3, [0.1, 0.0, -0.1]])
    res = minimize(lambda v: _q_function(s, M2, _unpack(v, L, p)), x0, method="BFGS", options={"gtol": 1e-10})
    num = _unpack(res.x, L, p)
    assert np.allclose(num.weights, closed.weights, atol=1e-5)
    assert np.allclose(num.means, closed.means, atol=1e-5)
    assert np.allclose(num.cov, closed.cov, atol=1e-5)


def test_tmap_stationary_by_finite_differences():
    s, M2 = _random_instance(np.random.default_rng(99))
    closed = gmm_tmap(s, M2, 2)
    chol = np.linalg.cholesky(closed.cov)
    x = np.concatenate(
        [[np.log(closed.weights[1] / closed.weights[0])], closed.means.ravel(), [np.log(chol[0, 0]), chol[1, 0], np.log(chol[1, 1])]]
    )
    # parameterise with the first logit pinned at 0 so that weights follow exp(x0)
    def f(v):
        logits = np.array([0.0, v[0]])
        w = np.exp(logits) / np.exp(logits).sum()
        mu = v[1:5].reshape(2, 2)
        c = np.array([[np.exp(v[5]), 0.0], [v[6], np.exp(v[7])]])
        return _q_function(s, M2, GmmTheta(w, mu, c @ c.T))

    eps = 1e-6
    grad = np.array([(f(x + eps * e) - f(x - eps * e)) / (2 * eps) for e in np.eye(len(x))])
    assert np.max(np.abs(grad)) <= 1e-6


def test_objective_single_gaussian_against_density():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((1, 30, 2))
    model = GaussianMixtureModel(y, 1)
    theta = GmmTheta(np.array([1.0]), y[0].mean(axis=0, keepdims=True), np.cov(y[0].T, bias=True))
    direct = -multivariate_normal(theta.means[0], theta.cov).logpdf(y[0]).mean()
    s = model.statistic_from_theta(theta)
    assert model.objective(s) == pytest.approx(direct - np.log(2 * np.pi), rel=1e-12)
    # same value through log-partition and natural parameter
    M2 = model.second_moment
    assert model.objective(s) == pytest.approx(_q_function(s, M2, theta), rel=1e-12)


def test_generate_point_mass_weights():
    truth = GmmTheta(np.array([1.0, 0.0]), np.array([[0.0], [5.0]]), np.eye(1))
    data = generate_synthetic(truth, 100, 10, seed=0)
    assert np.all(data.labels == 0)


def test_generate_shapes_and_divisibility(truth):
    data = generate_synthetic(truth, 10_000, 100, seed=1)
    assert data.data.shape == (100, 100, 2)
    with pytest.raises(ValueError):
        generate_synthetic(truth, 101, 10)


def test_iid_label_frequencies(truth):
    data = generate_synthetic(truth, 20_000, 10, "iid", seed=2)
    m = 2_000
    sd = np.sqrt(0.25 / m)
    freq = data.labels.mean(axis=1)
    assert np.all(np.abs(freq - 0.5) <= 3 * sd)


def test_sorted_split_is_heterogeneous(truth):
    data = generate_synthetic(truth, 1_000, 10, "sorted", seed=2)
    freq = data.labels.mean(axis=1)
    assert np.sum((freq == 0) | (freq == 1)) >= 8
    assert np.all(np.diff(freq) >= 0)


def test_batch_statistics_matches_rows(small_gmm, truth):
    rng = np.random.default_rng(0)
    idx = [rng.integers(0, small_gmm.m, 7) for _ in range(3)]
    fast = small_gmm.batch_statistics([0, 2, 3], idx, truth)
    slow = np.stack([small_gmm.sbar_rows(i, b, truth).mean(axis=0) for i, b in zip([0, 2, 3], idx)])
    assert np.allclose(fast, slow, atol=1e-14)
