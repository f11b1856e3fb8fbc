"""VR-FedEM: FedEM with SPIDER-style local control statistics.

Each worker keeps a control statistic ``S_i`` tracking ``sbar_i(T(S))``.
Inside an outer loop ``t`` the inner step ``k`` moves it by the minibatch
difference between the current and the previous server statistic::

    S_i += mean_{j in B} [sbar_ij(T(S_{t,k})) - sbar_ij(T(S_{t,k-1}))]

and the compressed memory machinery of FedEM follows with full
participation. At the start of every outer loop ``S_i`` is reset to the
exact local statistic, which cancels the bias accumulated by the control
variate. All workers participate in every inner step.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .compression import QuantizerSpec
from .exceptions import ConfigError, FedSpaceError, RunAborted
from .fedem import _chunked, check_consistency, draw_batches, quantize_rows
from .model import check_statistic, pairwise_mean, pairwise_sum
from .rng import PURPOSE_INIT, stream
from .trace import RoundTrace


def default_batch(k_in, omega):
    """``ceil(k_in / (1 + omega)^2)``."""
    return max(1, int(math.ceil(k_in / (1 + omega) ** 2 - 1e-12)))


def vr_gamma(v_min, v_max, L_dotW, L, n, omega):
    """Constant step size of the VR-FedEM convergence bound."""
    slope = 4 * math.sqrt(2) * (v_max / L_dotW) * (L / math.sqrt(n)) * (1 + omega)
    slope *= math.sqrt(omega + (1 + 10 * omega) / 8)
    return (v_min / L_dotW) / (1 + slope)


def optimal_k_in(m, omega):
    """Inner-loop length minimising the conditional-expectation cost."""
    return (1 + omega) * math.sqrt(m / 2)


@dataclass
class VrConfig:
    k_out: int = 10
    k_in: int = 20
    batch: Optional[int] = None
    gamma: float = 1e-2
    alpha: Optional[float] = None
    p: float = 1.0
    seed: int = 0
    quantizer: QuantizerSpec = field(default_factory=QuantizerSpec)
    v_init: str = "mean-field"
    replace: bool = True
    diag_every: int = 1
    gap_every: int = 10
    parallel: bool = False
    check_tol: float = 1e-9

    def resolved(self, model):
        """Copy with ``batch`` and ``alpha`` defaults filled in."""
        omega = self.quantizer.omega(model.q)
        out = VrConfig(**self.__dict__)
        if out.batch is None:
            out.batch = default_batch(self.k_in, omega)
        if out.alpha is None:
            out.alpha = 1.0 / (1 + omega)
        return out

    def validate(self, model):
        errors = []
        if self.k_out < 1:
            errors.append("k_out: must be >= 1")
        if self.k_in < 0:
            errors.append("k_in: must be >= 0")
        if self.batch is not None and not 1 <= self.batch <= int(np.min(model.shard_sizes)):
            errors.append("batch: must lie in [1, m]")
        if not self.gamma > 0:
            errors.append("gamma: must be > 0")
        if self.alpha is not None and not self.alpha > 0:
            errors.append("alpha: must be > 0")
        if self.p != 1:
            errors.append("p: VR-FedEM requires full participation (p = 1)")
        if self.v_init not in ("mean-field", "zeros"):
            errors.append("v_init: must be 'mean-field' or 'zeros'")
        if self.diag_every < 1:
            errors.append("diag_every: must be >= 1")
        if errors:
            raise ConfigError(errors)


@dataclass
class VrServerState:
    s_hat: np.ndarray
    s_prev: np.ndarray
    v: np.ndarray
    t: int = 1
    k: int = 0
    bits: int = 0
    ce_count: int = 0


@dataclass
class VrWorkerState:
    index: int
    memory: np.ndarray
    control: np.ndarray


@dataclass
class VrRun:
    trace: List[RoundTrace]
    server: VrServerState
    workers: List[VrWorkerState]
    bias_at_inner_start: List[float]


def vr_init(model, config, s0=None):
    """Initial states: one full pass gives ``S_i = sbar_i(T(s0))`` and, by
    default, ``V_i = S_i - s0``."""
    if s0 is None:
        s0 = model.initial_statistic(stream(config.seed, PURPOSE_INIT))
    s0 = check_statistic(model, s0).copy()
    local = model.sbar_workers(model.tmap(s0))
    if config.v_init == "mean-field":
        memories = local - s0
    else:
        memories = np.zeros_like(local)
    workers = [VrWorkerState(i, memories[i].copy(), local[i].copy()) for i in range(model.n)]
    server = VrServerState(
        s_hat=s0, s_prev=s0.copy(), v=pairwise_sum(memories) / model.n, ce_count=model.n_examples
    )
    return server, workers


def memory_gap(model, server, workers, theta=None):
    """``G = (1/n) sum_i ||V_i - h_i(S)||^2`` at the current statistic."""
    theta = model.tmap(server.s_hat) if theta is None else theta
    fields_ = model.sbar_workers(theta) - server.s_hat
    memories = np.stack([w.memory for w in workers])
    return float(np.mean(np.sum((memories - fields_) ** 2, axis=1)))


def vr_inner_step(model, config, server, workers, rng=None):
    """Inner iteration ``(t, k) -> (t, k+1)``; returns new states and a trace row."""
    seed = config.seed if rng is None else int(rng)
    check_consistency(server, workers, config.check_tol)
    t, k = server.t, server.k
    theta = model.tmap(server.s_hat)
    same = np.array_equal(server.s_prev, server.s_hat)
    theta_prev = theta if same else model.tmap(server.s_prev)

    everyone = list(range(model.n))
    idx = dict(zip(everyone, draw_batches(model, config.batch, config.replace, seed, (t, k), everyone)))

    def corrections(chunk):
        batches = [idx[i] for i in chunk]
        return model.batch_statistics(chunk, batches, theta) - model.batch_statistics(chunk, batches, theta_prev)

    controls = np.stack([w.control for w in workers]) + _chunked(corrections, everyone, config.parallel)
    memories = np.stack([w.memory for w in workers])
    messages = quantize_rows(model, config.quantizer, controls - server.s_hat - memories, seed, (t, k), everyone)
    decoded = messages.decoded
    total = pairwise_sum(decoded)
    new_workers = [
        VrWorkerState(w.index, w.memory + config.alpha * d, c) for w, d, c in zip(workers, decoded, controls)
    ]
    H = server.v + total / model.n
    bits = sum(msg.bit_cost for msg in messages)
    ce = 2 * config.batch * model.n

    due = k % config.diag_every == 0
    norm_h_sq = obj = math.nan
    if due:
        h = pairwise_mean(model.sbar_workers(theta)) - server.s_hat
        norm_h_sq = float(h @ h)
        obj = float(model.objective(server.s_hat))
    gap = math.nan
    step_index = (t - 1) * config.k_in + k
    if config.gap_every and step_index % config.gap_every == 0:
        gap = memory_gap(model, server, workers, theta)

    new_server = VrServerState(
        s_hat=server.s_hat + config.gamma * H,
        s_prev=server.s_hat,
        v=server.v + config.alpha * total / model.n,
        t=t,
        k=k + 1,
        bits=server.bits + bits,
        ce_count=server.ce_count + ce,
    )
    row = RoundTrace(
        algo="vr-fedem",
        epoch=new_server.ce_count / model.n_examples,
        t=t,
        k=k,
        norm_H_sq=float(H @ H),
        norm_h_sq=norm_h_sq,
        objective=obj,
        bits=new_server.bits,
        ce_count=new_server.ce_count,
        participants=model.n,
        G_memory_gap=gap,
    )
    return new_server, new_workers, row


def vr_outer_refresh(model, server, workers):
    """Start outer loop ``t+1``: reset every control statistic to the exact
    local statistic at the current server statistic. Memories and the
    server statistic are carried over."""
    local = model.sbar_workers(model.tmap(server.s_hat))
    new_workers = [VrWorkerState(w.index, w.memory, local[w.index].copy()) for w in workers]
    new_server = VrServerState(
        s_hat=server.s_hat,
        s_prev=server.s_hat.copy(),
        v=server.v,
        t=server.t + 1,
        k=0,
        bits=server.bits,
        ce_count=server.ce_count + model.n_examples,
    )
    return new_server, new_workers


def control_bias(model, server, workers, reference=None):
    """``max_i ||S_i - sbar_i(T(reference))||`` (reference defaults to the
    current server statistic)."""
    ref = server.s_hat if reference is None else reference
    local = model.sbar_workers(model.tmap(ref))
    controls = np.stack([w.control for w in workers])
    return float(np.max(np.linalg.norm(controls - local, axis=1)))


def run_vrfedem(model, config, s0=None, callback=None, track_bias=False):
    """Run ``k_out`` outer loops of ``k_in`` inner steps.

    The trace starts with an initialisation row (the full pass, ``k=-1``).
    With ``track_bias`` the control bias after the first inner step of every
    outer loop is recorded in ``VrRun.bias_at_inner_start``.
    """
    config.validate(model)
    config = config.resolved(model)
    config.validate(model)
    server, workers = vr_init(model, config, s0)
    trace = [
        RoundTrace(
            algo="vr-fedem",
            epoch=server.ce_count / model.n_examples,
            t=1,
            k=-1,
            norm_H_sq=math.nan,
            norm_h_sq=math.nan,
            objective=math.nan,
            bits=0,
            ce_count=server.ce_count,
            participants=model.n,
        )
    ]
    biases = []
    try:
        for t in range(1, config.k_out + 1):
            start = server.s_hat
            for _ in range(config.k_in):
                server, workers, row = vr_inner_step(model, config, server, workers)
                trace.append(row)
                if track_bias and server.k == 1:
                    biases.append(control_bias(model, server, workers, reference=start))
                if callback is not None:
                    callback(server, workers, row)
            if t < config.k_out:
                server, workers = vr_outer_refresh(model, server, workers)
    except (FedSpaceError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        raise RunAborted(trace, exc) from exc
    return VrRun(trace, server, workers, biases)


def expected_ce_count(n, m, k_out, k_in, batch):
    return n * m * k_out + 2 * n * batch * k_in * k_out


def k_out_for_epochs(model, config, epochs):
    """Outer loops needed for ``epochs`` passes of conditional-expectation work."""
    cfg = config.resolved(model)
    per_outer = model.n_examples + 2 * cfg.batch * model.n * cfg.k_in
    return max(1, int(math.ceil(epochs * model.n_examples / per_outer)))
