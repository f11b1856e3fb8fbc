"""Federated missing-value imputation with a Gaussian low-rank matrix model.

A ``J x L`` matrix ``theta`` of rank at most ``r`` is shared by ``n``
servers. Server ``c`` holds observed cells ``Omega^c`` with values
``Y^c``; several observers may report to the same server, and their values
on a common cell are averaged.

The complete data of a server is a full ``J x L`` matrix, so the
statistic is the flattened matrix itself (``q = J L``, row-major). With
Gaussian entries the conditional expectation is ``Y^c`` on ``Omega^c`` and
``theta`` elsewhere, and the M-step is the truncated SVD of the statistic.

Examples of server ``c`` are its observed cells. The per-example
expectation of cell ``e = (j, l)`` is ``theta + m_c (Y_e - theta_e) 1_e``,
whose average over the ``m_c`` cells is the exact local statistic above.
A minibatch of cells therefore gives an unbiased oracle that is dense
(``theta`` on unsampled cells) and corrects only the sampled cells.
"""

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, NamedTuple, Optional

import numpy as np

from .compression import QuantizerSpec
from .exceptions import ModelEvaluationError
from .fedem import FedEmConfig, run_fedem, with_rounds_for_epochs
from .model import ExpectationModel
from .rng import PURPOSE_DATA, stream


class LowRankTheta:
    """``theta = U V'`` with ``U`` of shape ``(J, r)`` and ``V`` of shape ``(L, r)``."""

    def __init__(self, U, V):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if U.shape[1] != V.shape[1]:
            raise ValueError("U and V must have the same number of columns")
        self.U = U
        self.V = V

    @property
    def rank(self):
        return self.U.shape[1]

    @property
    def shape(self):
        return self.U.shape[0], self.V.shape[0]

    @cached_property
    def matrix(self):
        return self.U @ self.V.T


def missem_mstep(S_hat, rank):
    """Best rank-``rank`` approximation of ``S_hat`` in Frobenius norm.

    Singular values are split evenly between the two factors.
    """
    S_hat = np.asarray(S_hat, dtype=float)
    if S_hat.ndim != 2:
        raise ValueError("statistic must be a matrix")
    if not 1 <= rank < min(S_hat.shape):
        raise ValueError(f"rank must lie in [1, {min(S_hat.shape)})")
    if not np.all(np.isfinite(S_hat)):
        raise ModelEvaluationError("statistic has non-finite entries")
    u, sv, vt = np.linalg.svd(S_hat, full_matrices=False)
    root = np.sqrt(sv[:rank])
    return LowRankTheta(u[:, :rank] * root, vt[:rank].T * root)


@dataclass
class ObservationShard:
    """Observed cells of one server after merging its observers."""

    server: int
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    n_observers: int = 1

    def __len__(self):
        return len(self.values)


def build_shards(observers, servers, rows, cols, values, shape):
    """Group observation triplets by server.

    Duplicate ``(observer, row, col)`` triplets are rejected; distinct
    observers of the same server reporting on a cell are averaged.
    Servers are numbered by their sorted ids.
    """
    observers = np.asarray(observers)
    servers = np.asarray(servers)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    J, L = shape
    if not (len(observers) == len(servers) == len(rows) == len(cols) == len(values)):
        raise ValueError("triplet columns have different lengths")
    if np.any((rows < 0) | (rows >= J) | (cols < 0) | (cols >= L)):
        raise IndexError(f"cell index outside the {J} x {L} grid")
    if not np.all(np.isfinite(values)):
        raise ValueError("observed values must be finite")
    _, obs_codes = np.unique(observers, return_inverse=True)
    cell = rows * L + cols
    key = obs_codes.astype(np.int64) * (J * L) + cell
    if len(np.unique(key)) != len(key):
        raise ValueError("duplicate (observer, row, col) triplet")
    shards = []
    for c, sid in enumerate(np.unique(servers)):
        sel = servers == sid
        cells, inverse = np.unique(cell[sel], return_inverse=True)
        total = np.bincount(inverse, weights=values[sel])
        count = np.bincount(inverse)
        shards.append(
            ObservationShard(
                server=c,
                rows=cells // L,
                cols=cells % L,
                values=total / count,
                n_observers=len(np.unique(observers[sel])),
            )
        )
    return shards


def read_triplets(path, shape=None):
    """Read an ``observer_id,server_id,row,col,value`` CSV into shards.

    Returns ``(shards, shape)``; the shape defaults to the smallest grid
    covering the observed indices.
    """
    cols_needed = ("observer_id", "server_id", "row", "col", "value")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in cols_needed if c not in (reader.fieldnames or ())]
        if missing:
            raise ValueError(f"triplet file lacks columns {missing}")
        recs = [[r[c] for c in cols_needed] for r in reader]
    if not recs:
        raise ValueError("triplet file has no observations")
    obs, srv, row, col, val = zip(*recs)
    row = np.array(row, dtype=np.int64)
    col = np.array(col, dtype=np.int64)
    if shape is None:
        shape = (int(row.max()) + 1, int(col.max()) + 1)
    return build_shards(np.array(obs), np.array(srv), row, col, np.array(val, dtype=float), shape), shape


class MissingDataModel(ExpectationModel):
    """Gaussian low-rank matrix model with the statistic on the ``J x L`` grid."""

    def __init__(self, shards: List[ObservationShard], shape, rank):
        self.shards = list(shards)
        self.shape = (int(shape[0]), int(shape[1]))
        self.rank = int(rank)
        if not 1 <= self.rank < min(self.shape):
            raise ValueError(f"rank must lie in [1, {min(self.shape)})")
        if not self.shards or any(len(s) == 0 for s in self.shards):
            raise ValueError("every server needs at least one observed cell")
        J, L = self.shape
        self.q = J * L
        self.shard_sizes = np.array([len(s) for s in self.shards])
        self._cells = [s.rows * L + s.cols for s in self.shards]

    def _theta_vec(self, theta):
        return theta.matrix.ravel()

    def sbar_rows(self, i, idx, theta):
        idx = np.asarray(idx)
        base = self._theta_vec(theta)
        cells = self._cells[i][idx]
        out = np.tile(base, (len(idx), 1))
        out[np.arange(len(idx)), cells] += self.shard_sizes[i] * (self.shards[i].values[idx] - base[cells])
        return out

    def sbar_worker(self, i, theta):
        out = self._theta_vec(theta).copy()
        out[self._cells[i]] = self.shards[i].values
        return out

    def sbar_workers(self, theta):
        return np.stack([self.sbar_worker(i, theta) for i in range(self.n)])

    def sample_statistic(self, i, theta, batch, rng, replace=True):
        size = int(self.shard_sizes[i])
        if batch is None or (not replace and batch >= size):
            return self.sbar_worker(i, theta)
        idx = self.sample_indices(i, batch, rng, replace)
        base = self._theta_vec(theta)
        cells = self._cells[i][idx]
        out = base.copy()
        np.add.at(out, cells, (size / batch) * (self.shards[i].values[idx] - base[cells]))
        return out

    def tmap(self, s):
        return missem_mstep(np.asarray(s, dtype=float).reshape(self.shape), self.rank)

    def objective(self, s):
        """Half the squared residual on observed cells, averaged over servers."""
        return self.fit_error(self.tmap(s))

    def fit_error(self, theta):
        flat = self._theta_vec(theta)
        per_server = [0.5 * np.sum((sh.values - flat[c]) ** 2) for sh, c in zip(self.shards, self._cells)]
        return float(np.mean(per_server))

    def encode_theta(self, theta):
        return np.concatenate([theta.U.ravel(), theta.V.ravel()])

    def decode_theta(self, vec):
        vec = np.asarray(vec, dtype=float)
        J, L = self.shape
        r = self.rank
        return LowRankTheta(vec[: J * r].reshape(J, r), vec[J * r :].reshape(L, r))

    def initial_statistic(self, rng=None):
        """Local statistics at ``theta = 0`` averaged over servers."""
        zero = LowRankTheta(np.zeros((self.shape[0], 1)), np.zeros((self.shape[1], 1)))
        return np.mean(self.sbar_workers(zero), axis=0)

    def observed_matrix(self):
        """Observed values averaged over servers, NaN where nothing is observed."""
        total = np.zeros(self.q)
        count = np.zeros(self.q)
        for sh, c in zip(self.shards, self._cells):
            np.add.at(total, c, sh.values)
            np.add.at(count, c, 1)
        out = np.full(self.q, np.nan)
        seen = count > 0
        out[seen] = total[seen] / count[seen]
        return out.reshape(self.shape)


def impute(model, theta):
    """Estimated matrix: observed values where available, ``theta`` elsewhere."""
    observed = model.observed_matrix()
    return np.where(np.isnan(observed), theta.matrix, observed)


class Trends(NamedTuple):
    totals: np.ndarray
    missing: np.ndarray


def column_trends(imputed, observed):
    """Per-column sums of the imputed matrix and the number of imputed cells."""
    return Trends(imputed.sum(axis=0), np.isnan(observed).sum(axis=0))


def write_imputed(path, imputed, observed):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["row", "col", "value", "observed"])
        for (j, l), v in np.ndenumerate(imputed):
            w.writerow([j, l, repr(float(v)), int(not np.isnan(observed[j, l]))])


def write_trends(path, trends):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["col", "total", "missing"])
        for col, (tot, miss) in enumerate(zip(trends.totals, trends.missing)):
            w.writerow([col, repr(float(tot)), int(miss)])


@dataclass
class MissEmConfig:
    rank: int = 2
    gamma: float = 2.0
    alpha: float = 0.5
    p: float = 1.0
    batch: Optional[int] = 100
    epochs: float = 150.0
    seed: int = 0
    quantizer: QuantizerSpec = field(default_factory=QuantizerSpec)
    diag_every: int = 1
    parallel: bool = False

    def fedem_config(self, model):
        batch = self.batch
        if batch is not None and batch > int(model.shard_sizes.min()):
            batch = None
        cfg = FedEmConfig(
            gamma=self.gamma,
            alpha=self.alpha,
            p=self.p,
            batch=batch,
            seed=self.seed,
            quantizer=self.quantizer,
            diag_every=self.diag_every,
            parallel=self.parallel,
        )
        return with_rounds_for_epochs(model, cfg, self.epochs)


@dataclass
class MissEmResult:
    trace: list
    theta: LowRankTheta
    imputed: np.ndarray
    trends: Trends
    statistic: np.ndarray


def run_missem(shards, shape, config: MissEmConfig, s0=None):
    """FedEM on the missing-data model; returns the trace, the low-rank fit,
    the imputed matrix and the column trends."""
    model = MissingDataModel(shards, shape, config.rank)
    run = run_fedem(model, config.fedem_config(model), s0=s0, algo="missem")
    theta = model.tmap(run.server.s_hat)
    imputed = impute(model, theta)
    trends = column_trends(imputed, model.observed_matrix())
    return MissEmResult(run.trace, theta, imputed, trends, run.server.s_hat)


class SyntheticMatrix(NamedTuple):
    truth: np.ndarray
    shards: list


def generate_low_rank(shape=(100, 50), rank=2, observed=0.3, noise=0.1, n_servers=10, seed=0):
    """Rank-``rank`` ground truth with unit-variance entries, a uniformly
    random observed subset, Gaussian noise, and cells dealt to servers
    uniformly at random (one observer per server)."""
    J, L = shape
    rng = stream(seed, PURPOSE_DATA)
    truth = rng.standard_normal((J, rank)) @ rng.standard_normal((rank, L)) / math.sqrt(rank)
    n_obs = int(round(observed * J * L))
    cells = rng.choice(J * L, size=n_obs, replace=False)
    server = rng.integers(0, n_servers, size=n_obs)
    # every server must see at least one cell
    server[:n_servers] = np.arange(n_servers)
    values = truth.ravel()[cells] + noise * rng.standard_normal(n_obs)
    shards = build_shards(server, server, cells // L, cells % L, values, shape)
    return SyntheticMatrix(truth, shards)


def relative_error(estimate, truth):
    return float(np.linalg.norm(estimate - truth) / np.linalg.norm(truth))
