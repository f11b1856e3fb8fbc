"""scikit-learn style front ends for the federated EM simulators."""

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .compression import QuantizerSpec
from .fedem import FedEmConfig, run_fedem, with_rounds_for_epochs
from .gmm import GaussianMixtureModel, GmmTheta, log_joint, responsibilities
from .harness import run_exact_em_trace, run_naive
from .missem import MissEmConfig, build_shards, column_trends, run_missem
from .rng import PURPOSE_INIT, PURPOSE_MISC, stream
from .vrfedem import VrConfig, k_out_for_epochs, run_vrfedem

ALGORITHMS = ("fedem", "vr-fedem", "naive", "exact-em")


def _quantizer(spec):
    if spec is None:
        return QuantizerSpec()
    if isinstance(spec, QuantizerSpec):
        return spec
    if isinstance(spec, dict):
        return QuantizerSpec(**spec)
    raise TypeError("quantizer must be a QuantizerSpec, a dict or None")


class FederatedGaussianMixture(BaseEstimator):
    """Shared-covariance Gaussian mixture fitted by federated EM.

    The rows of ``X`` are split into ``n_workers`` contiguous shards of
    equal size, so sorting ``X`` beforehand simulates heterogeneous workers.

    Parameters
    ----------
    n_components : int
    n_workers : int
        Must divide the number of rows passed to ``fit``.
    algorithm : {"fedem", "vr-fedem", "naive", "exact-em"}
    quantizer : QuantizerSpec, dict or None
        Uplink compression; None means no compression.
    gamma : float
        Server step size.
    alpha : float or None
        Memory step size; None uses ``1 / (1 + omega)``.
    p : float
        Participation probability (FedEM and naive only).
    batch_size : int or None
        Minibatch per worker and round; None uses full local passes
        (FedEM) or ``ceil(k_in / (1 + omega)^2)`` (VR-FedEM).
    n_epochs : float
        Budget in passes over the data.
    k_in : int
        Inner-loop length of VR-FedEM.
    covariance : "full" or array of shape (n_features, n_features)
        Estimate the shared covariance or keep it fixed at the given value.
    random_state : int
    """

    def __init__(
        self,
        n_components=2,
        n_workers=10,
        algorithm="fedem",
        quantizer=None,
        gamma=0.5,
        alpha=None,
        p=1.0,
        batch_size=None,
        n_epochs=50,
        k_in=20,
        covariance="full",
        random_state=0,
    ):
        self.n_components = n_components
        self.n_workers = n_workers
        self.algorithm = algorithm
        self.quantizer = quantizer
        self.gamma = gamma
        self.alpha = alpha
        self.p = p
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.k_in = k_in
        self.covariance = covariance
        self.random_state = random_state

    def _model(self, X):
        N, dim = X.shape
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.n_workers < 1 or N % self.n_workers:
            raise ValueError(f"n_samples={N} is not divisible by n_workers={self.n_workers}")
        if isinstance(self.covariance, str):
            if self.covariance != "full":
                raise ValueError("covariance must be 'full' or a matrix")
            cov = None
        else:
            cov = check_array(self.covariance)
            if cov.shape != (dim, dim):
                raise ValueError("fixed covariance has the wrong shape")
        data = X.reshape(self.n_workers, N // self.n_workers, dim)
        return GaussianMixtureModel(data, self.n_components, covariance=cov)

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        seed = int(self.random_state)
        model = self._model(X)
        s0 = model.initial_statistic(stream(seed, PURPOSE_INIT))
        qspec = _quantizer(self.quantizer)
        omega = qspec.omega(model.q)
        alpha = self.alpha if self.alpha is not None else 1.0 / (1 + omega)
        if self.algorithm == "exact-em":
            trace, s_hat = run_exact_em_trace(model, s0, int(np.ceil(self.n_epochs)))
        elif self.algorithm == "vr-fedem":
            cfg = VrConfig(
                k_in=self.k_in, batch=self.batch_size, gamma=self.gamma, alpha=alpha, seed=seed, quantizer=qspec
            )
            cfg.k_out = k_out_for_epochs(model, cfg, self.n_epochs)
            run = run_vrfedem(model, cfg, s0)
            trace, s_hat = run.trace, run.server.s_hat
        else:
            cfg = FedEmConfig(
                gamma=self.gamma, alpha=alpha, p=self.p, batch=self.batch_size, seed=seed, quantizer=qspec
            )
            cfg = with_rounds_for_epochs(model, cfg, self.n_epochs)
            runner = run_naive if self.algorithm == "naive" else run_fedem
            run = runner(model, cfg, s0)
            trace, s_hat = run.trace, run.server.s_hat
        theta = model.tmap(s_hat)
        self.weights_ = theta.weights
        self.means_ = theta.means
        self.covariance_ = theta.cov
        self.statistic_ = s_hat
        self.trace_ = trace
        self.n_features_in_ = X.shape[1]
        return self

    def _theta(self):
        check_is_fitted(self, "statistic_")
        return GmmTheta(self.weights_, self.means_, self.covariance_)

    def _check_X(self, X):
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict_proba(self, X):
        theta = self._theta()
        return np.atleast_2d(responsibilities(theta, self._check_X(X)))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score_samples(self, X):
        theta = self._theta()
        return logsumexp(log_joint(theta, self._check_X(X)), axis=1)

    def score(self, X, y=None):
        """Average log-likelihood per sample."""
        return float(np.mean(self.score_samples(X)))


class FederatedMissingImputer(TransformerMixin, BaseEstimator):
    """Low-rank imputation of a partially observed matrix by federated EM.

    ``fit`` takes the matrix with NaN marking missing cells. Observed cells
    are dealt to ``n_servers`` servers uniformly at random unless
    ``groups`` (an integer array of the same shape) assigns them.
    Imputation is transductive: ``transform`` fills the NaN cells of a
    matrix with the shape seen in ``fit``.
    """

    def __init__(
        self,
        rank=2,
        n_servers=10,
        gamma=2.0,
        alpha=0.5,
        p=1.0,
        batch_size=100,
        n_epochs=150,
        quantizer=None,
        random_state=0,
    ):
        self.rank = rank
        self.n_servers = n_servers
        self.gamma = gamma
        self.alpha = alpha
        self.p = p
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.quantizer = quantizer
        self.random_state = random_state

    def fit(self, X, y=None, groups=None):
        X = check_array(X, ensure_all_finite="allow-nan")
        seen = ~np.isnan(X)
        rows, cols = np.nonzero(seen)
        if groups is None:
            server = stream(int(self.random_state), PURPOSE_MISC).integers(0, self.n_servers, size=len(rows))
        else:
            groups = np.asarray(groups)
            if groups.shape != X.shape:
                raise ValueError("groups must have the same shape as X")
            server = groups[rows, cols]
        shards = build_shards(server, server, rows, cols, X[rows, cols], X.shape)
        cfg = MissEmConfig(
            rank=self.rank,
            gamma=self.gamma,
            alpha=self.alpha,
            p=self.p,
            batch=self.batch_size,
            epochs=self.n_epochs,
            seed=int(self.random_state),
            quantizer=_quantizer(self.quantizer),
        )
        result = run_missem(shards, X.shape, cfg)
        self.theta_ = result.theta.matrix
        self.components_ = (result.theta.U, result.theta.V)
        self.trace_ = result.trace
        self.trends_ = column_trends(np.where(seen, X, self.theta_), X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "theta_")
        X = check_array(X, ensure_all_finite="allow-nan", copy=True)
        if X.shape != self.theta_.shape:
            raise ValueError(f"X has shape {X.shape}, expected {self.theta_.shape}")
        missing = np.isnan(X)
        X[missing] = self.theta_[missing]
        return X
