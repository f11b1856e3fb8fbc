"""Expectation-space EM abstraction.

A model lives in the space of complete-data sufficient statistics
``s`` (a flat float vector of length ``q``). It provides

* per-example conditional expectations of the sufficient statistics
  for worker ``i`` at parameter ``theta`` (``sbar_rows``),
* the M-step map ``tmap`` from a statistic to a parameter,
* the objective ``W(s) = F(T(s))``,
* a parameter codec to and from flat vectors.

Algorithms only ever see statistics as opaque vectors; the layout is
documented by each concrete model.
"""

import abc

import numpy as np

from .exceptions import ModelEvaluationError


def pairwise_sum(rows):
    """Sum the rows of a 2-D array with numpy's pairwise summation.

    numpy only applies pairwise summation along a contiguous axis, so the
    array is transposed into C order before reducing.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        return rows.copy()
    return np.ascontiguousarray(rows.T).sum(axis=1)


def pairwise_mean(rows):
    rows = np.asarray(rows, dtype=float)
    return pairwise_sum(rows) / rows.shape[0]


class ExpectationModel(abc.ABC):
    """Base class for a latent-variable model split over ``n`` workers.

    Subclasses set ``q`` (statistic dimension) and ``shard_sizes`` (number
    of examples held by each worker) and implement the abstract methods.
    """

    q: int
    shard_sizes: np.ndarray

    @property
    def n(self):
        return len(self.shard_sizes)

    @property
    def m(self):
        """Examples per worker; only defined for equal-size shards."""
        sizes = np.unique(self.shard_sizes)
        if len(sizes) != 1:
            raise ValueError("shards have unequal sizes; use shard_sizes")
        return int(sizes[0])

    @property
    def n_examples(self):
        return int(np.sum(self.shard_sizes))

    @abc.abstractmethod
    def sbar_rows(self, i, idx, theta):
        """Per-example conditional expectations, shape ``(len(idx), q)``."""

    @abc.abstractmethod
    def tmap(self, s):
        """M-step: map a statistic to the unique minimiser parameter."""

    @abc.abstractmethod
    def objective(self, s):
        """Return ``W(s) = F(T(s))``."""

    @abc.abstractmethod
    def encode_theta(self, theta):
        """Flatten a parameter into a float vector."""

    @abc.abstractmethod
    def decode_theta(self, vec):
        """Inverse of :meth:`encode_theta`."""

    def sbar_worker(self, i, theta):
        """Exact local statistic: mean of the per-example expectations."""
        idx = np.arange(self.shard_sizes[i])
        return pairwise_mean(self.sbar_rows(i, idx, theta))

    def sbar_workers(self, theta):
        """Stack of the ``n`` exact local statistics, shape ``(n, q)``."""
        return np.stack([self.sbar_worker(i, theta) for i in range(self.n)])

    def sample_statistic(self, i, theta, batch, rng, replace=True):
        """Minibatch oracle for the local statistic of worker ``i``.

        Draws ``batch`` examples uniformly (with replacement by default)
        and averages their conditional expectations. ``batch=None`` or a
        full batch drawn without replacement returns the exact local
        statistic.
        """
        size = int(self.shard_sizes[i])
        if batch is None or (not replace and batch >= size):
            return self.sbar_worker(i, theta)
        idx = self.sample_indices(i, batch, rng, replace)
        return pairwise_mean(self.sbar_rows(i, idx, theta))

    def batch_statistics(self, workers, indices, theta):
        """Minibatch means ``mean_j sbar_ij(theta)`` for several workers at
        once; ``indices[a]`` holds the batch of ``workers[a]``."""
        return np.stack([pairwise_mean(self.sbar_rows(i, idx, theta)) for i, idx in zip(workers, indices)])

    def sample_indices(self, i, batch, rng, replace=True):
        size = int(self.shard_sizes[i])
        if replace:
            return rng.integers(0, size, size=batch)
        return rng.choice(size, size=batch, replace=False)

    def initial_statistic(self, rng=None):
        raise NotImplementedError(f"{type(self).__name__} has no default initialisation")


def check_statistic(model, s):
    s = np.asarray(s, dtype=float)
    if s.shape != (model.q,):
        raise ValueError(f"statistic must have shape ({model.q},), got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ModelEvaluationError("statistic has non-finite entries")
    return s


def sbar_i(model, i, theta):
    """Exact local statistic of worker ``i`` (0-based) at ``theta``."""
    if not 0 <= i < model.n:
        raise IndexError(f"worker index {i} out of range [0, {model.n})")
    out = model.sbar_worker(i, theta)
    if not np.all(np.isfinite(out)):
        raise ModelEvaluationError(f"non-finite conditional expectation on worker {i}")
    return out


def sbar(model, theta):
    """Global statistic ``(1/n) sum_i sbar_i(theta)``."""
    return pairwise_mean(model.sbar_workers(theta))


def exact_em_step(model, s):
    """One EM iteration in the expectation space: ``sbar(T(s))``."""
    s = check_statistic(model, s)
    return sbar(model, model.tmap(s))


def mean_field(model, s):
    """``h(s) = sbar(T(s)) - s``; its roots are the EM fixed points."""
    s = check_statistic(model, s)
    return exact_em_step(model, s) - s


def local_fields(model, s, theta=None):
    """Per-worker fields ``h_i(s) = sbar_i(T(s)) - s``, shape ``(n, q)``."""
    s = check_statistic(model, s)
    if theta is None:
        theta = model.tmap(s)
    return model.sbar_workers(theta) - s


def objective(model, s):
    s = check_statistic(model, s)
    value = float(model.objective(s))
    if not np.isfinite(value):
        raise ModelEvaluationError("objective is not finite")
    return value


def run_exact_em(model, s0, n_iter):
    """Iterates ``s_0, ..., s_{n_iter}`` of exact EM."""
    path = [check_statistic(model, s0)]
    for _ in range(n_iter):
        path.append(exact_em_step(model, path[-1]))
    return np.array(path)
