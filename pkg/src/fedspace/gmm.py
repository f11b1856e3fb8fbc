"""Gaussian mixture with a shared covariance as an expectation-space model.

Statistic layout for ``L`` components in dimension ``p`` (``q = L + L p``)::

    s = [rho_1, ..., rho_L, rho_1 y (p entries), ..., rho_L y (p entries)]

i.e. the mean responsibilities followed by the responsibility-weighted
means, component-major. The second moment ``M2 = mean(y y^T)`` over the
whole data set is computed once at construction (the central server can
assemble it from per-worker sums before the first round).
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .exceptions import DegenerateComponentError, ModelEvaluationError
from .model import ExpectationModel, pairwise_mean
from .rng import PURPOSE_DATA, PURPOSE_INIT, stream

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-12
EIGEN_FLOOR = 1e-10
COV_JITTER = 1e-8
LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class GmmTheta:
    weights: np.ndarray
    means: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False, compare=False)
    chol_inv: np.ndarray = field(init=False, repr=False, compare=False)
    log_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if means.shape[0] != weights.shape[0] or cov.shape != (means.shape[1],) * 2:
            raise ValueError("inconsistent GMM parameter shapes")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ModelEvaluationError("covariance is not positive definite") from exc
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "chol_inv", solve_triangular(chol, np.eye(len(chol)), lower=True))
        with np.errstate(divide="ignore"):
            object.__setattr__(self, "log_weights", np.log(weights))

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.chol)))


def log_joint(theta, y):
    """``log pi_l + log N(y; mu_l, Sigma)``, shape ``(K, L)``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if not np.all(np.isfinite(y)):
        raise ValueError("data contain non-finite values")
    # whiten once: (y - mu) A' = y A' - mu A' with A = chol^-1
    wy = y @ theta.chol_inv.T
    wmu = theta.means @ theta.chol_inv.T
    z = wy[:, None, :] - wmu[None, :, :]
    maha = np.einsum("kld,kld->kl", z, z)
    p = y.shape[1]
    return theta.log_weights - 0.5 * (maha + theta.logdet() + p * LOG_2PI)


def responsibilities(theta, y):
    """Posterior component probabilities, computed with log-sum-exp."""
    y = np.asarray(y, dtype=float)
    lj = log_joint(theta, y)
    rho = np.exp(lj - lj.max(axis=1, keepdims=True))
    rho /= rho.sum(axis=1, keepdims=True)
    return rho[0] if y.ndim == 1 else rho


def statistic_rows(theta, y):
    """Conditional expectations of ``s(y, z)`` for each row of ``y``."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    rho = responsibilities(theta, y)
    weighted = rho[:, :, None] * y[:, None, :]
    return np.concatenate([rho, weighted.reshape(len(y), -1)], axis=1)


def natural_parameter(theta):
    """``phi(theta)``: ``log pi_l - mu_l' S^-1 mu_l / 2`` then ``S^-1 mu_l``."""
    prec_mu = np.linalg.solve(theta.cov, theta.means.T).T
    with np.errstate(divide="ignore"):
        first = np.log(theta.weights) - 0.5 * np.sum(theta.means * prec_mu, axis=1)
    return np.concatenate([first, prec_mu.ravel()])


def log_partition(theta, second_moment):
    """``psi(theta) = log det(S) / 2 + <M2, S^-1> / 2``."""
    prec = np.linalg.inv(theta.cov)
    return 0.5 * theta.logdet() + 0.5 * np.sum(second_moment * prec)


def gmm_tmap(s, second_moment, n_components, covariance=None):
    """Closed-form M-step.

    With ``covariance`` given the covariance is held fixed and only the
    weights and means are updated. Otherwise
    ``Sigma(s) = M2 - sum_l s1_l mu_l mu_l'``, shifted to a minimum
    eigenvalue of ``1e-8`` when it is not numerically positive definite.
    """
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ModelEvaluationError("statistic has non-finite entries")
    s1 = s[:n_components]
    s2 = s[n_components:].reshape(n_components, -1)
    if np.any(s1 < WEIGHT_FLOOR):
        bad = np.flatnonzero(s1 < WEIGHT_FLOOR).tolist()
        raise DegenerateComponentError(f"components {bad} have vanishing weight {s1[bad]}")
    weights = s1 / s1.sum()
    means = s2 / s1[:, None]
    if covariance is not None:
        cov = np.asarray(covariance, dtype=float)
    else:
        cov = np.asarray(second_moment, dtype=float) - s2.T @ means
        cov = 0.5 * (cov + cov.T)
        lo = np.linalg.eigvalsh(cov)[0]
        if lo < EIGEN_FLOOR:
            logger.info("covariance floor applied (min eigenvalue %.3e)", lo)
            cov = cov + (COV_JITTER - lo) * np.eye(cov.shape[0])
    return GmmTheta(weights, means, cov)


class GaussianMixtureModel(ExpectationModel):
    """Shared-covariance Gaussian mixture over worker shards.

    Parameters
    ----------
    data : array of shape (n, m, p)
        ``data[i]`` holds the ``m`` examples of worker ``i``.
    n_components : int
    covariance : array of shape (p, p), optional
        Known covariance. When omitted the covariance is estimated.
    """

    def __init__(self, data, n_components, covariance=None):
        data = np.asarray(data, dtype=float)
        if data.ndim != 3:
            raise ValueError("data must have shape (n_workers, m, dim)")
        if not np.all(np.isfinite(data)):
            raise ValueError("data contain non-finite values")
        self.data = data
        self.n_components = int(n_components)
        self.dim = data.shape[2]
        self.covariance = None if covariance is None else np.atleast_2d(np.asarray(covariance, dtype=float))
        self.q = self.n_components * (1 + self.dim)
        self.shard_sizes = np.full(data.shape[0], data.shape[1])
        flat = data.reshape(-1, self.dim)
        self.second_moment = flat.T @ flat / flat.shape[0]

    def sbar_rows(self, i, idx, theta):
        return statistic_rows(theta, self.data[i, idx])

    def sbar_workers(self, theta):
        n, m, _ = self.data.shape
        rows = statistic_rows(theta, self.data.reshape(-1, self.dim)).reshape(n, m, self.q)
        return np.ascontiguousarray(rows.transpose(0, 2, 1)).sum(axis=2) / m

    def batch_statistics(self, workers, indices, theta):
        sizes = {len(idx) for idx in indices}
        if len(sizes) != 1:
            return super().batch_statistics(workers, indices, theta)
        b = sizes.pop()
        y = self.data[np.asarray(workers)[:, None], np.stack(indices)].reshape(-1, self.dim)
        rows = statistic_rows(theta, y).reshape(len(workers), b, self.q)
        return np.ascontiguousarray(rows.transpose(0, 2, 1)).sum(axis=2) / b

    def tmap(self, s):
        return gmm_tmap(s, self.second_moment, self.n_components, self.covariance)

    def objective(self, s):
        """Normalised negative log-likelihood ``F(T(s))``.

        Equal to ``-mean(log p(y)) - p log(2 pi) / 2``.
        """
        theta = self.tmap(s)
        return self.negative_log_likelihood(theta)

    def negative_log_likelihood(self, theta):
        flat = self.data.reshape(-1, self.dim)
        lj = log_joint(theta, flat)
        return float(-np.mean(logsumexp(lj, axis=1)) - 0.5 * self.dim * LOG_2PI)

    def encode_theta(self, theta):
        return np.concatenate([theta.weights, theta.means.ravel(), theta.cov.ravel()])

    def decode_theta(self, vec):
        vec = np.asarray(vec, dtype=float)
        n_comp, p = self.n_components, self.dim
        weights = vec[:n_comp]
        means = vec[n_comp : n_comp + n_comp * p].reshape(n_comp, p)
        cov = vec[n_comp + n_comp * p :].reshape(p, p)
        return GmmTheta(weights, means, cov)

    def initial_theta(self, rng=None):
        """Uniform weights, means drawn among the examples, and the known or
        empirical covariance."""
        rng = rng if rng is not None else stream(0, PURPOSE_INIT)
        flat = self.data.reshape(-1, self.dim)
        pick = rng.choice(flat.shape[0], size=self.n_components, replace=False)
        if self.covariance is not None:
            cov = self.covariance
        else:
            cov = np.atleast_2d(np.cov(flat.T, bias=True))
        weights = np.full(self.n_components, 1.0 / self.n_components)
        return GmmTheta(weights, flat[pick], cov)

    def initial_statistic(self, rng=None):
        return pairwise_mean(self.sbar_workers(self.initial_theta(rng)))

    def statistic_from_theta(self, theta):
        """Statistic whose M-step returns ``theta`` (weights times means layout)."""
        return np.concatenate([theta.weights, (theta.weights[:, None] * theta.means).ravel()])


class SyntheticData(NamedTuple):
    data: np.ndarray
    labels: np.ndarray


def default_truth():
    """Two well-separated components in the plane used by the reproduction runs."""
    return GmmTheta(
        weights=np.array([0.4, 0.6]),
        means=np.array([[-1.5, 0.5], [1.5, -0.5]]),
        cov=np.array([[1.0, 0.3], [0.3, 0.6]]),
    )


def generate_synthetic(truth, N, n, split="iid", seed=0):
    """Draw ``N`` labelled points and partition them into ``n`` shards.

    ``split="iid"`` shards in draw order; ``split="sorted"`` orders the
    draws by latent label first, so most workers see a single component.
    """
    if N % n:
        raise ValueError(f"N={N} is not divisible by n={n}")
    if split not in ("iid", "sorted"):
        raise ValueError(f"unknown split {split!r}")
    rng = stream(seed, PURPOSE_DATA)
    labels = rng.choice(truth.n_components, size=N, p=truth.weights)
    noise = rng.standard_normal((N, truth.dim)) @ truth.chol.T
    points = truth.means[labels] + noise
    if split == "sorted":
        order = np.argsort(labels, kind="stable")
        labels, points = labels[order], points[order]
    m = N // n
    return SyntheticData(points.reshape(n, m, truth.dim), labels.reshape(n, m))
