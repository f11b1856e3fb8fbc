"""Acceptance criteria, one test each. Every test records a PASS/FAIL line
that is printed in the pytest terminal summary."""

import math
import time

import numpy as np
import pytest

from conftest import record
from fedspace import model as core
from fedspace.fedem import (
    FedEmConfig,
    ServerState,
    WorkerState,
    corollary_gamma,
    gamma_max,
    memory_mean,
    omega_p,
    run_fedem,
    sample_field,
)
from fedspace.harness import (
    HETEROGENEITY,
    SECTION4,
    cesaro_halves,
    first_diag,
    heterogeneity_experiment,
    last_diag,
    quantizer_suite,
    section4_experiment,
    synthetic_gmm,
    uniform_K_summary,
)
from fedspace.missem import MissEmConfig, generate_low_rank, missem_mstep, relative_error, run_missem
from fedspace.rng import PURPOSE_MISC, stream
from fedspace.trace import column
from fedspace.vrfedem import VrConfig, expected_ce_count, run_vrfedem, vr_gamma

QUANT = SECTION4["quantizer"]  # block-2, blocks (2, 4): omega = 1
MISSEM_THRESHOLD = 0.1


def verdict(number, ok, detail):
    record(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def test_criterion_01_quantizer_contracts():
    with Timer() as clock:
        results = quantizer_suite(trials=100_000, count=20, max_dim=64, seed=0)
    failed = [r for r in results if not r.passed]
    block2 = [r for r in results if r.check_mse]
    worst = max(abs(r.mse_z) for r in block2)
    ok = not failed and clock.elapsed < 30
    verdict(
        1,
        ok,
        f"quantizer moments {len(results) - len(failed)}/{len(results)} checks, "
        f"block-2 exact-MSE max |z|={worst:.2f}, {clock.elapsed:.1f}s (< 30s)",
    )


def test_criterion_02_exact_em_reduction(small_gmm, small_s0):
    with Timer() as clock:
        states = []
        config = FedEmConfig(gamma=1.0, alpha=0.5, p=1.0, batch=None, k_max=50)
        run_fedem(small_gmm, config, small_s0, callback=lambda s, w, r: states.append(s.s_hat))
        oracle = core.run_exact_em(small_gmm, small_s0, 50)[1:]
        err = max(float(np.max(np.abs(a - b))) for a, b in zip(states, oracle))
    ok = len(states) == 50 and err <= 1e-12 and clock.elapsed < 5
    verdict(2, ok, f"FedEM vs exact EM over 50 iterations, max abs diff {err:.2e} (<= 1e-12), {clock.elapsed:.2f}s")


def test_criterion_03_memory_mean_identity():
    model = synthetic_gmm(2_000, 20, "iid", seed=0)
    gaps = []
    config = FedEmConfig(gamma=1e-2, alpha=1e-2, p=0.75, batch=20, k_max=1_000, quantizer=QUANT, diag_every=1_000)
    with Timer() as clock:
        run_fedem(model, config, callback=lambda s, w, r: gaps.append(float(np.max(np.abs(s.v - memory_mean(w))))))
    worst = max(gaps)
    ok = len(gaps) == 1_000 and worst <= 1e-12 and clock.elapsed < 10
    verdict(3, ok, f"V vs mean V_i over 1000 rounds (p=0.75, omega=1), max gap {worst:.2e} (<= 1e-12), {clock.elapsed:.1f}s")


def test_criterion_04_field_unbiased():
    model = synthetic_gmm(400, 8, "iid", seed=1)
    s0 = model.initial_statistic(stream(1, PURPOSE_MISC, 0))
    rng = np.random.default_rng(0)
    memories = 0.05 * rng.standard_normal((model.n, model.q))
    workers = [WorkerState(i, memories[i]) for i in range(model.n)]
    server = ServerState(s_hat=s0, v=memory_mean(workers))
    config = FedEmConfig(p=0.75, batch=5, quantizer=QUANT)
    theta = model.tmap(s0)
    draws = 100_000
    with Timer() as clock:
        H = np.empty((draws, model.q))
        for d in range(draws):
            H[d] = sample_field(model, config, server, workers, k=0, seed=d, theta=theta)[0]
    h = core.mean_field(model, s0)
    z = (H.mean(axis=0) - h) / (H.std(axis=0, ddof=1) / math.sqrt(draws))
    ok = bool(np.all(np.abs(z) <= 3)) and clock.elapsed < 60
    verdict(4, ok, f"E[H] = h(S) per coordinate over 1e5 draws (p=0.75), max |z|={np.max(np.abs(z)):.2f} (<= 3), {clock.elapsed:.1f}s")


@pytest.fixture(scope="module")
def section4():
    with Timer() as clock:
        result = section4_experiment(seed=0, diag_every=5)
    return result, clock.elapsed


def _tenth(trace):
    return max(1, int(np.sum(~np.isnan(column(trace, "norm_h_sq")))) // 10)


def _H_running_mean(trace):
    values = column([r for r in trace if r.k >= 0], "norm_H_sq")
    return float(values.mean())


def test_criterion_05_section4_reproduction(section4):
    result, elapsed = section4
    fed, vr = result.trace("fedem"), result.trace("vr-fedem")
    # final value: mean over the last tenth of the diagnostics (the plateau)
    drop_fed = first_diag(fed) / last_diag(fed, _tenth(fed))
    drop_vr = first_diag(vr) / last_diag(vr, _tenth(vr))
    H_fed, H_vr = _H_running_mean(fed), _H_running_mean(vr)
    ok = drop_fed >= 10 and drop_vr >= 10 and H_vr < H_fed and elapsed < 600
    verdict(
        5,
        ok,
        f"|h|^2 drop FedEM x{drop_fed:.3g}, VR-FedEM x{drop_vr:.3g} (>= 10); "
        f"mean |H|^2 VR {H_vr:.3g} < FedEM {H_fed:.3g}; epochs {fed[-1].epoch:.0f}/{vr[-1].epoch:.0f}, {elapsed:.0f}s",
    )


def test_criterion_06_heterogeneity():
    with Timer() as clock:
        result = heterogeneity_experiment(seed=0)
    fed, naive = result.trace("fedem"), result.trace("naive")
    s_fed, s_naive = uniform_K_summary(fed), uniform_K_summary(naive)
    final_fed, final_naive = last_diag(fed, 10), last_diag(naive, 10)
    # the naive curve must stay well away from zero while FedEM's vanishes
    ok = s_fed < s_naive and final_naive > 1e-4 and final_naive > 1e3 * final_fed and clock.elapsed < 300
    verdict(
        6,
        ok,
        f"sorted split, {HETEROGENEITY['epochs']} epochs: summary FedEM {s_fed:.3g} < naive {s_naive:.3g}; "
        f"final |h|^2 FedEM {final_fed:.2g}, naive {final_naive:.2g}, {clock.elapsed:.1f}s",
    )


def test_criterion_07_vr_bias_cancellation():
    model = synthetic_gmm(SECTION4["N"], SECTION4["n"], "iid", seed=0)
    config = VrConfig(k_out=20, k_in=20, batch=5, gamma=1e-2, alpha=1e-2, quantizer=QUANT, diag_every=100, gap_every=0)
    with Timer() as clock:
        run = run_vrfedem(model, config, track_bias=True)
    worst = max(run.bias_at_inner_start)
    ok = len(run.bias_at_inner_start) == 20 and worst <= 1e-12 and clock.elapsed < 120
    verdict(7, ok, f"max_i |S_(t,1,i) - sbar_i(T(S_t,0))| over 20 outer loops = {worst:.2e} (<= 1e-12), {clock.elapsed:.1f}s")


def test_criterion_08_ce_accounting():
    model = synthetic_gmm(1_000, 10, "iid", seed=0)
    checks = []
    for k_out, k_in, b in [(1, 0, 5), (3, 5, 5), (4, 20, 2), (2, 7, 1)]:
        run = run_vrfedem(model, VrConfig(k_out=k_out, k_in=k_in, batch=b, quantizer=QUANT, diag_every=1000, gap_every=0))
        formula = model.n * model.m * k_out + 2 * model.n * b * k_in * k_out
        checks.append(run.trace[-1].ce_count == formula == expected_ce_count(model.n, model.m, k_out, k_in, b))
    verdict(8, all(checks), f"ce_count = n m k_out + 2 n b k_in k_out on {sum(checks)}/{len(checks)} runs")


# hand-derived values
GAMMA_MAX_CASES = [
    ((1, 1, 1, 8, 1, 1), 0.5),
    ((3, 2, 100, 4, 0, 1), 0.75),
    ((1, 0.01, 1, 32, 1, 0.5), 0.5 / math.sqrt(3)),
    ((10, 1, 0.5, 2, 3, 1), 1 / (4 * math.sqrt(3))),
    ((1, 1, 1, 16, 0, 0.25), 1 / (2 * math.sqrt(6))),
]
COROLLARY_CASES = [
    ((1, 100, 10**4, 1, 1, 1, 1.0), math.sqrt(1 / 600)),
    ((1, 100, 10**4, 1, 1, 0, 0.3), 0.3),
    ((4, 10, 10, 1, 0, 1, 10.0), 2.0),
    ((1, 1, 1, 1, 1, 1, 0.1), 0.1),
    ((2, 50, 100, 0.5, 0.2, 4, 1.0), 0.5),
]
VR_CASES = [
    ((1, 1, 1, 1, 32, 1), 1 / (1 + 2 * math.sqrt(19 / 8))),
    ((1, 1, 1, 1, 4, 0), 0.5),
    ((2, 1, 1, 1, 4, 0), 1.0),
    ((1, 2, 2, 1, 16, 0), 1 / 3),
    ((1, 1, 1, 1, 2, 1), 1 / (1 + math.sqrt(152))),
]
OMEGA_P_CASES = [((1, 0.75), 5 / 3), ((0, 0.5), 1.0), ((2, 1), 2.0), ((1, 0.5), 3.0), ((3, 0.25), 15.0)]


def test_criterion_09_step_sizes():
    errors = []
    for fn, cases in ((gamma_max, GAMMA_MAX_CASES), (corollary_gamma, COROLLARY_CASES), (vr_gamma, VR_CASES), (omega_p, OMEGA_P_CASES)):
        errors += [abs(fn(*args) - want) for args, want in cases]
    worst = max(errors)
    verdict(9, worst <= 1e-12, f"{len(errors)} calculator values vs hand derivations, max abs error {worst:.1e} (<= 1e-12)")


def test_criterion_10_cesaro_memory_decay():
    model = synthetic_gmm(1_000, 10, "sorted", seed=0)
    s0 = model.initial_statistic(stream(0, PURPOSE_MISC, 0))
    config = VrConfig(k_out=500, k_in=20, batch=5, gamma=1e-2, alpha=1e-2, quantizer=QUANT, diag_every=1000, gap_every=10)
    with Timer() as clock:
        run = run_vrfedem(model, config, s0)
    first, second = cesaro_halves(run.trace)
    steps = len(run.trace) - 1
    ok = steps == 10_000 and second < first and clock.elapsed < 300
    verdict(10, ok, f"G over {steps} inner steps: first half {first:.3g}, second half {second:.3g}, {clock.elapsed:.1f}s")


def test_criterion_11_missem_recovery():
    with Timer() as clock:
        syn = generate_low_rank((100, 50), rank=2, observed=0.3, noise=0.1, n_servers=10, seed=0)
        result = run_missem(syn.shards, (100, 50), MissEmConfig(rank=2, epochs=150))
        err = relative_error(result.theta.matrix, syn.truth)
        rng = np.random.default_rng(0)
        S = rng.standard_normal((100, 50))
        best = np.linalg.norm(S - missem_mstep(S, 2).matrix)
        optimal = all(
            best <= np.linalg.norm(S - rng.standard_normal((100, 2)) @ rng.standard_normal((2, 50))) for _ in range(100)
        )
    ok = err <= MISSEM_THRESHOLD and optimal and clock.elapsed < 180
    verdict(
        11,
        ok,
        f"rank-2 100x50, 30% observed: relative error {err:.3f} (<= {MISSEM_THRESHOLD}); "
        f"M-step optimal in 100/100 comparisons: {optimal}; {clock.elapsed:.1f}s",
    )
