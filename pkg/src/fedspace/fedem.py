"""FedEM: federated EM with compressed memory-corrected updates and
Bernoulli partial participation.

Round ``k`` (0-based) with server statistic ``S`` and worker memories
``V_i``:

* every worker joins independently with probability ``p``;
* a participant draws a minibatch oracle ``S_i`` of ``sbar_i(T(S))``,
  forms ``D_i = S_i - V_i - S`` and sends ``Quant(D_i)``;
  it then sets ``V_i += alpha * Quant(D_i)``;
* the server forms ``H = V + sum Quant(D_i) / (n p)``, moves
  ``S += gamma * H`` and ``V += alpha * sum Quant(D_i) / n``.

Random draws come from counter-based streams addressed by
``(seed, purpose, round, worker)``, so runs are reproducible regardless of
worker execution order.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Union

import numpy as np

from . import compression
from .compression import QuantizerSpec
from .exceptions import ConfigError, FedSpaceError, InconsistentStateError, RunAborted
from .model import check_statistic, local_fields, pairwise_sum
from .rng import PURPOSE_BATCH, PURPOSE_INIT, PURPOSE_PARTICIPATION, PURPOSE_QUANT, stream
from .trace import RoundTrace, column

V_INIT_MODES = ("mean-field", "zeros")


@dataclass
class FedEmConfig:
    gamma: Union[float, Callable[[int], float]] = 1e-2
    alpha: float = 0.5
    p: float = 1.0
    batch: Optional[int] = None
    replace: bool = True
    k_max: int = 100
    v_init: str = "mean-field"
    seed: int = 0
    quantizer: QuantizerSpec = field(default_factory=QuantizerSpec)
    diag_every: int = 1
    theory_mode: bool = False
    parallel: bool = False
    check_tol: float = 1e-9

    def step_size(self, k):
        """Step size used by round ``k`` (``gamma_{k+1}``)."""
        return float(self.gamma(k + 1)) if callable(self.gamma) else float(self.gamma)

    def validate(self, model):
        errors = []
        if not callable(self.gamma) and not self.gamma > 0:
            errors.append("gamma: must be > 0")
        if not self.alpha > 0:
            errors.append("alpha: must be > 0")
        if not 0 < self.p <= 1:
            errors.append("p: must lie in (0, 1]")
        if self.batch is not None and not 1 <= self.batch <= int(np.min(model.shard_sizes)):
            errors.append("batch: must lie in [1, m]")
        if self.k_max < 0:
            errors.append("k_max: must be >= 0")
        if self.v_init not in V_INIT_MODES:
            errors.append(f"v_init: must be one of {V_INIT_MODES}")
        if self.diag_every < 1:
            errors.append("diag_every: must be >= 1")
        try:
            omega = self.quantizer.omega(model.q)
            if self.theory_mode and self.alpha * (1 + omega) > 1 + 1e-12:
                errors.append(f"alpha: theory mode requires alpha * (1 + omega) <= 1 (omega={omega:g})")
        except ValueError as exc:
            errors.append(f"quantizer: {exc}")
        if errors:
            raise ConfigError(errors)


@dataclass
class ServerState:
    s_hat: np.ndarray
    v: np.ndarray
    k: int = 0
    bits: int = 0
    ce_count: int = 0


@dataclass
class WorkerState:
    index: int
    memory: np.ndarray


@dataclass
class FedEmRun:
    trace: List[RoundTrace]
    server: ServerState
    workers: List[WorkerState]

    @property
    def summary(self):
        """Average of the mean-field diagnostic over rounds: the estimate of
        ``E||h(S_K)||^2`` for ``K`` uniform over the rounds."""
        values = column(self.trace, "norm_h_sq")
        values = values[~np.isnan(values)]
        return float(values.mean()) if values.size else math.nan


def omega_p(omega, p):
    """Compression constant inflated by partial participation."""
    return omega + (1 - p) * (1 + omega) / p


def gamma_max(v_min, L_dotW, L, n, omega, p=1.0):
    """Largest constant step size covered by the FedEM convergence bound."""
    first = v_min / (2 * L_dotW)
    wp = omega_p(omega, p)
    if wp == 0:
        return first
    second = p * math.sqrt(n) / (2 * math.sqrt(2) * L * (1 + omega) * math.sqrt(wp))
    return min(first, second)


def corollary_gamma(W0_gap, n, k_max, L_dotW, omega, sigma2, gamma_max):
    """Bias/variance-balancing step size, capped at ``gamma_max``."""
    if sigma2 == 0:
        return gamma_max
    return min(math.sqrt(W0_gap * n / (k_max * L_dotW * (1 + 5 * omega) * sigma2)), gamma_max)


def oracle_statistic(model, i, s_hat, batch, rng, replace=True, theta=None):
    """Minibatch approximation of ``sbar_i(T(s_hat))``."""
    if theta is None:
        theta = model.tmap(s_hat)
    return model.sample_statistic(i, theta, batch, rng, replace=replace)


def participation(seed, k, n, p):
    """Boolean participation mask of round ``k``."""
    if p >= 1:
        return np.ones(n, dtype=bool)
    return stream(seed, PURPOSE_PARTICIPATION, k).random(n) < p


def init_states(model, config, s0=None):
    """Initial server and worker states.

    ``v_init="mean-field"`` sets ``V_i = h_i(s0)`` (one full pass, counted
    in ``ce_count``); ``"zeros"`` starts every memory at zero.
    """
    if s0 is None:
        s0 = model.initial_statistic(stream(config.seed, PURPOSE_INIT))
    s0 = check_statistic(model, s0).copy()
    ce = 0
    if config.v_init == "mean-field":
        memories = local_fields(model, s0)
        ce = model.n_examples
    else:
        memories = np.zeros((model.n, model.q))
    workers = [WorkerState(i, memories[i].copy()) for i in range(model.n)]
    server = ServerState(s_hat=s0, v=pairwise_sum(memories) / model.n, ce_count=ce)
    return server, workers


def memory_mean(workers):
    return pairwise_sum(np.stack([w.memory for w in workers])) / len(workers)


def check_consistency(server, workers, tol=1e-9):
    gap = float(np.max(np.abs(server.v - memory_mean(workers))))
    if gap > tol * max(1.0, float(np.max(np.abs(server.v)))):
        raise InconsistentStateError(f"server memory differs from worker mean by {gap:.3e}")
    return gap


_EXECUTOR = None


def _chunked(fn, items, parallel):
    """Apply ``fn`` to contiguous chunks of ``items`` (on a thread pool when
    ``parallel``) and concatenate the results in order."""
    if not parallel or len(items) < 2:
        return fn(items)
    global _EXECUTOR
    if _EXECUTOR is None:
        _EXECUTOR = ThreadPoolExecutor()
    chunks = np.array_split(np.asarray(items), min(len(items), os.cpu_count() or 1))
    parts = list(_EXECUTOR.map(fn, [c for c in chunks if len(c)]))
    return np.concatenate(parts) if isinstance(parts[0], np.ndarray) else sum(parts, [])


def draw_batches(model, batch, replace, seed, address, workers):
    """Minibatch indices of ``workers`` for the round at ``address``.

    With replacement one stream per round serves every worker: worker
    ``i`` reads row ``i`` of an ``(n, batch)`` uniform draw, so a worker's
    batch does not depend on which other workers take part.
    """
    if replace:
        u = stream(seed, PURPOSE_BATCH, *address).random((model.n, batch))
        sizes = np.asarray(model.shard_sizes)[:, None]
        idx = np.minimum((u * sizes).astype(np.int64), sizes - 1)
        return list(idx[np.asarray(workers, dtype=np.int64)])
    return [model.sample_indices(i, batch, stream(seed, PURPOSE_BATCH, *address, i), False) for i in workers]


def quantize_rows(model, spec, deltas, seed, address, workers):
    """Compress ``deltas[a]`` for ``workers[a]``. Worker ``i`` uses row ``i``
    of one ``(n, q)`` uniform draw per round."""
    if spec.kind == "identity" or len(workers) == 0:
        return compression.quantize_rows(spec, np.reshape(deltas, (-1, model.q)), None)
    u = stream(seed, PURPOSE_QUANT, *address).random((model.n, model.q))
    return compression.quantize_rows(spec, deltas, u[np.asarray(workers)])


def local_statistics(model, config, theta, active, seed, address):
    """Oracle statistics of the ``active`` workers, shape ``(len(active), q)``."""
    if len(active) == 0:
        return np.zeros((0, model.q))
    full = config.batch is None or (not config.replace and config.batch >= int(np.min(model.shard_sizes)))
    if full:
        if len(active) == model.n:
            return model.sbar_workers(theta)
        return np.stack([model.sbar_worker(i, theta) for i in active])
    idx = dict(zip(active, draw_batches(model, config.batch, config.replace, seed, address, active)))
    return _chunked(
        lambda chunk: model.batch_statistics(chunk, [idx[i] for i in chunk], theta), list(active), config.parallel
    )


def _local_messages(model, config, server, workers, theta, mask, k, seed, memory=True):
    """Quantized messages of the participating workers, ordered by index."""
    active = np.flatnonzero(mask)
    stats = local_statistics(model, config, theta, active, seed, (k,))
    deltas = stats - server.s_hat
    if memory and len(active):
        deltas = deltas - np.stack([workers[i].memory for i in active])
    return active, quantize_rows(model, config.quantizer, deltas, seed, (k,), active)


def _batch_cost(model, config, i):
    size = int(model.shard_sizes[i])
    if config.batch is None or (not config.replace and config.batch >= size):
        return size
    return config.batch


def sample_field(model, config, server, workers, k=None, seed=None, theta=None):
    """Draw the field ``H`` of round ``k`` without changing any state.

    Returns ``(H, active worker indices, decoded messages)``.
    """
    seed = config.seed if seed is None else seed
    k = server.k if k is None else k
    theta = model.tmap(server.s_hat) if theta is None else theta
    mask = participation(seed, k, model.n, config.p)
    active, messages = _local_messages(model, config, server, workers, theta, mask, k, seed)
    decoded = messages.decoded
    total = pairwise_sum(decoded) if len(decoded) else np.zeros(model.q)
    return server.v + total / (model.n * config.p), active, decoded


def _diagnostics(model, s_hat, theta, due):
    if not due:
        return math.nan, math.nan
    field_ = model.sbar_workers(theta)
    h = pairwise_sum(field_) / model.n - s_hat
    return float(h @ h), float(model.objective(s_hat))


def fedem_round(model, config, server, workers, rng=None):
    """One FedEM round. Returns ``(server, workers, RoundTrace)``; the input
    states are not modified.

    ``rng`` is the integer root of the counter-based streams
    (``config.seed`` by default).
    """
    seed = config.seed if rng is None else int(rng)
    check_consistency(server, workers, config.check_tol)
    k = server.k
    theta = model.tmap(server.s_hat)
    mask = participation(seed, k, model.n, config.p)
    active, messages = _local_messages(model, config, server, workers, theta, mask, k, seed)

    new_workers = list(workers)
    if messages:
        decoded = messages.decoded
        total = pairwise_sum(decoded)
        for i, d in zip(active, decoded):
            new_workers[i] = WorkerState(int(i), workers[i].memory + config.alpha * d)
    else:
        total = np.zeros(model.q)
    H = server.v + total / (model.n * config.p)
    gamma = config.step_size(k)
    bits = sum(m.bit_cost for m in messages)
    ce = sum(_batch_cost(model, config, i) for i in active)
    norm_h_sq, obj = _diagnostics(model, server.s_hat, theta, k % config.diag_every == 0)

    new_server = ServerState(
        s_hat=server.s_hat + gamma * H,
        v=server.v + config.alpha * total / model.n,
        k=k + 1,
        bits=server.bits + bits,
        ce_count=server.ce_count + ce,
    )
    row = RoundTrace(
        algo="fedem",
        epoch=new_server.ce_count / model.n_examples,
        t=0,
        k=k,
        norm_H_sq=float(H @ H),
        norm_h_sq=norm_h_sq,
        objective=obj,
        bits=new_server.bits,
        ce_count=new_server.ce_count,
        participants=len(active),
    )
    return new_server, new_workers, row


def run_fedem(model, config, s0=None, callback=None, round_fn=None, algo="fedem"):
    """Run ``config.k_max`` rounds and return a :class:`FedEmRun`.

    ``callback(server, workers, row)`` is called after every round. Any
    failure is re-raised as :class:`RunAborted` carrying the partial trace.
    """
    config.validate(model)
    round_fn = round_fn or fedem_round
    server, workers = init_states(model, config, s0)
    trace = []
    try:
        for _ in range(config.k_max):
            server, workers, row = round_fn(model, config, server, workers)
            row.algo = algo
            trace.append(row)
            if callback is not None:
                callback(server, workers, row)
    except (FedSpaceError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        raise RunAborted(trace, exc) from exc
    return FedEmRun(trace, server, workers)


def rounds_for_epochs(model, config, epochs):
    """Rounds needed for ``epochs`` passes worth of expected oracle calls."""
    per_round = config.p * sum(_batch_cost(model, config, i) for i in range(model.n))
    return int(math.ceil(epochs * model.n_examples / per_round))


def with_rounds_for_epochs(model, config, epochs):
    return replace(config, k_max=rounds_for_epochs(model, config, epochs))
