"""Experiment orchestration: the naive baseline, constant estimation, run
summaries and the synthetic Gaussian-mixture experiments."""

import json
import math
from dataclasses import asdict, dataclass, is_dataclass, replace
from typing import NamedTuple

import numpy as np

from .compression import QuantizerSpec
from .exceptions import FedSpaceError
from .fedem import (
    FedEmConfig,
    ServerState,
    _batch_cost,
    _diagnostics,
    _local_messages,
    participation,
    run_fedem,
    with_rounds_for_epochs,
)
from .gmm import GaussianMixtureModel, default_truth, generate_synthetic
from .model import check_statistic, local_fields, pairwise_sum
from .rng import PURPOSE_MISC, as_generator, stream
from .trace import RoundTrace, column
from .vrfedem import VrConfig, k_out_for_epochs, run_vrfedem


def naive_baseline_round(model, config, server, workers, rng=None):
    """Compressed distributed EM without memories.

    Participants send ``Quant(S_i - S)`` and the server moves along
    ``H = sum Quant(S_i - S) / (n p)``. Worker memories and ``server.v``
    are left untouched.
    """
    seed = config.seed if rng is None else int(rng)
    k = server.k
    theta = model.tmap(server.s_hat)
    mask = participation(seed, k, model.n, config.p)
    active, messages = _local_messages(model, config, server, workers, theta, mask, k, seed, memory=False)
    if messages:
        total = pairwise_sum(messages.decoded)
    else:
        total = np.zeros(model.q)
    H = total / (model.n * config.p)
    norm_h_sq, obj = _diagnostics(model, server.s_hat, theta, k % config.diag_every == 0)
    new_server = ServerState(
        s_hat=server.s_hat + config.step_size(k) * H,
        v=server.v,
        k=k + 1,
        bits=server.bits + sum(m.bit_cost for m in messages),
        ce_count=server.ce_count + sum(_batch_cost(model, config, i) for i in active),
    )
    row = RoundTrace(
        algo="naive",
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
    return new_server, list(workers), row


def run_naive(model, config, s0=None, callback=None):
    """Naive baseline driver; memories start (and stay) at zero."""
    return run_fedem(model, replace(config, v_init="zeros"), s0, callback, naive_baseline_round, algo="naive")


def run_exact_em_trace(model, s0, n_iter, algo="exact-em"):
    """Exact EM with the same trace schema (one full pass per iteration)."""
    s = check_statistic(model, s0)
    rows = []
    ce = 0
    for k in range(n_iter):
        theta = model.tmap(s)
        nxt = pairwise_sum(model.sbar_workers(theta)) / model.n
        h = nxt - s
        ce += model.n_examples
        rows.append(
            RoundTrace(algo, ce / model.n_examples, 0, k, float(h @ h), float(h @ h), float(model.objective(s)), 0, ce, model.n)
        )
        s = nxt
    return rows, s


class ConstantsReport(NamedTuple):
    L: float
    L_workers: np.ndarray
    max_ratio: float
    median_ratio: float
    probes: int


def estimate_constants(model, s0, probes=100, rng=None, radius=0.1):
    """Empirical Lipschitz constants of the local fields around ``s0``.

    ``model`` is an expectation model or a callable mapping a statistic to
    the ``(n, q)`` stack of local fields. Random secant pairs within
    ``radius`` of ``s0`` give ``L_i`` as the largest observed ratio
    ``||h_i(s) - h_i(s')|| / ||s - s'||``; ``L = sqrt(mean L_i^2)``.
    These are lower bounds, not certificates.
    """
    if probes < 10:
        raise ValueError("at least 10 probes are needed")
    rng = as_generator(rng if rng is not None else stream(0, PURPOSE_MISC))
    s0 = np.asarray(s0, dtype=float)
    fields_fn = model if callable(model) else (lambda s: local_fields(model, s))
    ratios = []
    for _ in range(probes):
        a = s0 + radius * rng.standard_normal(s0.shape)
        b = s0 + radius * rng.standard_normal(s0.shape)
        gap = np.linalg.norm(a - b)
        if gap == 0:
            continue
        ha = np.atleast_2d(fields_fn(a))
        hb = np.atleast_2d(fields_fn(b))
        ratios.append(np.linalg.norm(ha - hb, axis=1) / gap)
    ratios = np.array(ratios)
    L_workers = ratios.max(axis=0)
    per_probe = ratios.max(axis=1)
    return ConstantsReport(
        float(np.sqrt(np.mean(L_workers**2))),
        L_workers,
        float(per_probe.max()),
        float(np.median(per_probe)),
        len(ratios),
    )


def uniform_K_summary(trace, burn_in=0):
    """Mean of ``norm_h_sq`` over rounds ``burn_in`` onwards, ignoring
    thinned (NaN) rows: the Monte-Carlo value of ``E||h(S_K)||^2`` for a
    uniformly drawn round ``K``."""
    rows = [r for r in trace if r.k >= 0][burn_in:]
    if not rows:
        raise ValueError("trace has no rounds to summarise")
    values = column(rows, "norm_h_sq")
    values = values[~np.isnan(values)]
    if not values.size:
        raise ValueError("trace has no mean-field diagnostics")
    return float(values.mean())


def running_mean(values):
    values = np.asarray(values, dtype=float)
    return np.cumsum(values) / np.arange(1, len(values) + 1)


def first_diag(trace):
    values = column(trace, "norm_h_sq")
    return float(values[~np.isnan(values)][0])


def last_diag(trace, tail=1):
    values = column(trace, "norm_h_sq")
    values = values[~np.isnan(values)]
    return float(values[-tail:].mean())


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if callable(obj):
        return getattr(obj, "__name__", repr(obj))
    return obj


def write_manifest(path, resolved):
    """Sidecar JSON with the resolved configuration and seed."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(resolved), fh, indent=2, sort_keys=True)
        fh.write("\n")


# Synthetic Gaussian-mixture experiments


SECTION4 = dict(
    N=10_000,
    n=100,
    p=0.75,
    gamma=1e-2,
    alpha=1e-2,
    fedem_batch=20,
    vr_batch=5,
    k_in=20,
    epochs=500,
    quantizer=QuantizerSpec("block", p_norm=2.0, blocks=(2, 4)),
)


def synthetic_gmm(N, n, split="iid", seed=0, known_covariance=True, truth=None):
    truth = truth if truth is not None else default_truth()
    data = generate_synthetic(truth, N, n, split, seed)
    cov = truth.cov if known_covariance else None
    return GaussianMixtureModel(data.data, truth.n_components, covariance=cov)


@dataclass
class ComparisonResult:
    runs: dict
    s0: np.ndarray

    def trace(self, name):
        return self.runs[name].trace


def section4_experiment(seed=0, epochs=None, diag_every=1, **overrides):
    """FedEM (with partial participation) and VR-FedEM on the synthetic
    two-component mixture in the plane with known covariance."""
    cfg = dict(SECTION4, **overrides)
    epochs = cfg["epochs"] if epochs is None else epochs
    model = synthetic_gmm(cfg["N"], cfg["n"], "iid", seed)
    s0 = model.initial_statistic(stream(seed, PURPOSE_MISC, 0))
    fed_cfg = FedEmConfig(
        gamma=cfg["gamma"],
        alpha=cfg["alpha"],
        p=cfg["p"],
        batch=cfg["fedem_batch"],
        seed=seed,
        quantizer=cfg["quantizer"],
        diag_every=diag_every,
    )
    fed = run_fedem(model, with_rounds_for_epochs(model, fed_cfg, epochs), s0)
    vr_cfg = VrConfig(
        k_in=cfg["k_in"],
        batch=cfg["vr_batch"],
        gamma=cfg["gamma"],
        alpha=cfg["alpha"],
        seed=seed,
        quantizer=cfg["quantizer"],
        diag_every=diag_every,
        gap_every=0,
    )
    vr_cfg.k_out = k_out_for_epochs(model, vr_cfg, epochs)
    vr = run_vrfedem(model, vr_cfg, s0)
    return ComparisonResult({"fedem": fed, "vr-fedem": vr}, s0)


HETEROGENEITY = dict(
    N=2_000,
    n=20,
    p=1.0,
    gamma=0.2,
    alpha=0.5,
    batch=None,
    epochs=150,
    quantizer=QuantizerSpec("block", p_norm=2.0, blocks=(2, 4)),
)


def heterogeneity_experiment(seed=0, **overrides):
    """FedEM and the naive baseline on a label-sorted split with equal
    epoch budgets."""
    cfg = dict(HETEROGENEITY, **overrides)
    model = synthetic_gmm(cfg["N"], cfg["n"], "sorted", seed)
    s0 = model.initial_statistic(stream(seed, PURPOSE_MISC, 0))
    base = FedEmConfig(
        gamma=cfg["gamma"],
        alpha=cfg["alpha"],
        p=cfg["p"],
        batch=cfg["batch"],
        seed=seed,
        quantizer=cfg["quantizer"],
    )
    base = with_rounds_for_epochs(model, base, cfg["epochs"])
    fed = run_fedem(model, base, s0)
    naive = run_naive(model, base, s0)
    return ComparisonResult({"fedem": fed, "naive": naive}, s0)


def guarded(fn, *args, **kwargs):
    """Call ``fn`` and return ``(result, None)`` or ``(None, error)`` for
    library errors, for batch drivers that must keep going."""
    try:
        return fn(*args, **kwargs), None
    except FedSpaceError as exc:
        return None, exc


def block_omega_one(q):
    """Block partition of ``q`` coordinates into blocks of length 4 (and
    smaller remainders) so that block-2 quantization has ``omega = 1``."""
    blocks = [4] * (q // 4)
    if q % 4:
        blocks.append(q % 4)
    return tuple(blocks)


def cesaro_halves(trace):
    """First- and second-half averages of the sampled memory gaps."""
    gaps = column(trace, "G_memory_gap")
    gaps = gaps[~np.isnan(gaps)]
    if len(gaps) < 2:
        raise ValueError("not enough memory-gap samples")
    half = len(gaps) // 2
    return float(gaps[:half].mean()), float(gaps[half:].mean())


def bits_per_epoch(trace):
    last = trace[-1]
    return last.bits / last.epoch if last.epoch else math.nan


# Quantizer moment suite


SUITE_OPERATORS = (
    ("dithering-l2-s1", QuantizerSpec("dithering", r=2.0, levels=1)),
    ("dithering-linf-s4", QuantizerSpec("dithering", r=np.inf, levels=4)),
    ("block2-single", QuantizerSpec("block", p_norm=2.0)),
    ("block1-single", QuantizerSpec("block", p_norm=1.0)),
)


class QuantCheck(NamedTuple):
    operator: str
    vector: int
    dim: int
    mean_z: float
    second_moment: float
    bound: float
    mse: float
    exact_mse: float
    mse_z: float
    check_mse: bool = True

    @property
    def passed(self):
        ok = abs(self.mean_z) <= 3 and self.second_moment <= self.bound
        return ok and (not self.check_mse or abs(self.mse_z) <= 3)


def suite_vectors(count=20, max_dim=64, seed=0):
    """Test vectors of assorted dimensions and shapes (dense, sparse,
    heavy-tailed, constant)."""
    rng = stream(seed, PURPOSE_MISC, 1)
    out = []
    for v in range(count):
        q = int(rng.integers(1, max_dim + 1)) if v else max_dim
        kind = v % 4
        if kind == 0:
            x = rng.standard_normal(q)
        elif kind == 1:
            x = rng.standard_normal(q) * (rng.random(q) < 0.3)
            x[0] = 1.0
        elif kind == 2:
            x = rng.standard_cauchy(q)
        else:
            x = np.full(q, 0.7)
        out.append(x)
    return out


def check_quantizer(name, spec, x, trials, rng, vector=0, chunk=20_000):
    """Monte-Carlo check of unbiasedness (along a random direction), of the
    variance bound and of the closed-form error, each at three standard
    errors. The closed-form error is enforced for block-2 quantization and
    reported for the other operators."""
    from .compression import exact_mse, sample

    q = len(x)
    direction = rng.standard_normal(q)
    direction /= np.linalg.norm(direction)
    proj = np.zeros(2)
    sq = np.zeros(2)
    err = np.zeros(2)
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        draws = sample(spec, x, size, rng)
        a = draws @ direction
        b = np.einsum("ij,ij->i", draws, draws)
        d = draws - x
        c = np.einsum("ij,ij->i", d, d)
        proj += (a.sum(), (a * a).sum())
        sq += (b.sum(), (b * b).sum())
        err += (c.sum(), (c * c).sum())
        done += size

    def mean_se(acc):
        mean = acc[0] / trials
        var = max(acc[1] / trials - mean**2, 0.0)
        return mean, math.sqrt(var / max(trials - 1, 1))

    pm, pse = mean_se(proj)
    target = float(x @ direction)
    mean_z = 0.0 if pse == 0 and abs(pm - target) < 1e-12 * (1 + abs(target)) else (pm - target) / max(pse, 1e-300)
    sm, sse = mean_se(sq)
    bound = (1 + spec.omega(q)) * float(x @ x) + 3 * sse + 1e-12 * float(x @ x)
    em, ese = mean_se(err)
    ex = exact_mse(spec, x)
    mse_z = 0.0 if ese == 0 and abs(em - ex) <= 1e-9 * (1 + ex) else (em - ex) / max(ese, 1e-300)
    check_mse = spec.kind == "block" and spec.p_norm == 2
    return QuantCheck(name, vector, q, float(mean_z), float(sm), float(bound), float(em), float(ex), float(mse_z), check_mse)


def quantizer_suite(trials=100_000, count=20, max_dim=64, seed=0, operators=SUITE_OPERATORS):
    """Run :func:`check_quantizer` for every operator and test vector."""
    vectors = suite_vectors(count, max_dim, seed)
    results = []
    for o, (name, spec) in enumerate(operators):
        for v, x in enumerate(vectors):
            rng = stream(seed, PURPOSE_MISC, 2, o, v)
            results.append(check_quantizer(name, spec, x, trials, rng, v))
    return results
