"""Command-line entry point.

Subcommands::

    fedspace run CONFIG [--output-dir DIR] [--workers-parallel]
    fedspace validate CONFIG
    fedspace quant-test [--trials N] [--vectors N] [--max-dim Q] [--seed S]
    fedspace summarize TRACE [--burn-in K]

Exit status is 0 on success, 1 on runtime errors (including failed
quantizer checks) and 2 on configuration errors.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace

from .config import AUTO_GAMMA, OUTPUT_ENV, load_config, resolve_alpha, theorem_gamma
from .exceptions import ConfigError, FedSpaceError, RunAborted
from .fedem import FedEmConfig, run_fedem, with_rounds_for_epochs
from .harness import estimate_constants, quantizer_suite, run_exact_em_trace, run_naive, synthetic_gmm
from .harness import uniform_K_summary, write_manifest
from .missem import (
    MissingDataModel,
    generate_low_rank,
    impute,
    column_trends,
    read_triplets,
    write_imputed,
    write_trends,
)
from .rng import PURPOSE_INIT, PURPOSE_MISC, stream
from .trace import read_trace, write_trace
from .vrfedem import VrConfig, k_out_for_epochs, run_vrfedem

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

logger = logging.getLogger("fedspace")


def build_parser():
    parser = argparse.ArgumentParser(prog="fedspace", description="Federated EM simulators.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config")
    run.add_argument("--output-dir", help=f"overrides experiment.output_dir and ${OUTPUT_ENV}")
    run.add_argument("--workers-parallel", action="store_true", help="evaluate workers on a thread pool")

    val = sub.add_parser("validate", help="check a config file and print it resolved")
    val.add_argument("config")

    qt = sub.add_parser("quant-test", help="Monte-Carlo checks of the compression operators")
    qt.add_argument("--trials", type=int, default=100_000)
    qt.add_argument("--vectors", type=int, default=20)
    qt.add_argument("--max-dim", type=int, default=64)
    qt.add_argument("--seed", type=int, default=0)

    summ = sub.add_parser("summarize", help="mean of the mean-field diagnostic of a trace")
    summ.add_argument("trace")
    summ.add_argument("--burn-in", type=int, default=0)
    return parser


def _build_model(cfg):
    m = cfg.model
    if m["kind"] == "gmm":
        return synthetic_gmm(m["n_samples"], m["n_workers"], m["split"], m["data_seed"], m["covariance"] == "known")
    if m["kind"] == "missem-synthetic":
        syn = generate_low_rank((m["rows"], m["cols"]), m["rank"], m["observed"], m["noise"], m["n_servers"], m["data_seed"])
        return MissingDataModel(syn.shards, (m["rows"], m["cols"]), m["rank"])
    shape = (m["rows"], m["cols"]) if "rows" in m and "cols" in m else None
    shards, shape = read_triplets(m["path"], shape)
    return MissingDataModel(shards, shape, m["rank"])


def _batch(cfg):
    batch = cfg.params.get("batch")
    return None if batch == "full" else batch


def resolve(cfg, model):
    """Numeric step sizes and loop lengths for ``cfg`` on ``model``;
    returns ``(resolved dict, algorithm config)``."""
    resolved = {}
    omega = cfg.quantizer.omega(model.q)
    alpha = resolve_alpha(cfg, model.q)
    gamma = cfg.params["gamma"]
    if gamma == AUTO_GAMMA:
        L = cfg.constants.get("L")
        if L is None:
            s0 = model.initial_statistic(stream(cfg.seed, PURPOSE_INIT))
            report = estimate_constants(model, s0, cfg.diagnostics["probes"], stream(cfg.seed, PURPOSE_MISC, 3))
            L = report.L
            resolved["L_estimate"] = report._asdict()
        gamma = theorem_gamma(cfg, L=L, q=model.q)
    resolved.update(omega=omega, alpha=alpha, gamma=gamma)
    algo = cfg.algorithm
    if algo == "vr-fedem":
        vc = VrConfig(
            k_in=cfg.params["k_in"],
            batch=_batch(cfg),
            gamma=gamma,
            alpha=alpha,
            seed=cfg.seed,
            quantizer=cfg.quantizer,
            v_init=cfg.params["v_init"],
            diag_every=cfg.diagnostics["diag_every"],
            gap_every=cfg.diagnostics["gap_every"],
        )
        vc.k_out = cfg.params["k_out"] if "k_out" in cfg.params else k_out_for_epochs(model, vc, cfg.params["epochs"])
        vc = vc.resolved(model)
        resolved.update(k_out=vc.k_out, k_in=vc.k_in, batch=vc.batch)
        return resolved, vc
    fc = FedEmConfig(
        gamma=gamma,
        alpha=alpha,
        p=cfg.params["p"],
        batch=_batch(cfg),
        seed=cfg.seed,
        quantizer=cfg.quantizer,
        v_init=cfg.params["v_init"],
        diag_every=cfg.diagnostics["diag_every"],
    )
    if algo == "missem" and fc.batch is not None and fc.batch > int(model.shard_sizes.min()):
        fc.batch = None
    if "k_max" in cfg.params:
        fc.k_max = cfg.params["k_max"]
    elif algo == "exact-em":
        fc.k_max = int(round(cfg.params["epochs"]))
    else:
        fc = with_rounds_for_epochs(model, fc, cfg.params["epochs"])
    resolved.update(k_max=fc.k_max, batch=fc.batch)
    return resolved, fc


def execute(cfg, model, algo_cfg):
    """Run the configured algorithm; returns ``(trace, final statistic)``."""
    s0 = model.initial_statistic(stream(cfg.seed, PURPOSE_INIT))
    name = cfg.algorithm
    if name == "exact-em":
        return run_exact_em_trace(model, s0, algo_cfg.k_max)
    if name == "vr-fedem":
        run = run_vrfedem(model, algo_cfg, s0)
    elif name == "naive":
        run = run_naive(model, algo_cfg, s0)
    else:
        run = run_fedem(model, algo_cfg, s0, algo=name)
    return run.trace, run.server.s_hat


def cmd_run(args):
    cfg = load_config(args.config)
    out_dir = args.output_dir or cfg.output_dir
    model = _build_model(cfg)
    resolved, algo_cfg = resolve(cfg, model)
    if args.workers_parallel:
        algo_cfg = replace(algo_cfg, parallel=True)
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, cfg.name)
    manifest = {"config": cfg.sections(), "resolved": resolved, "algorithm_config": algo_cfg}
    manifest["config"]["experiment"]["output_dir"] = out_dir
    write_manifest(stem + ".manifest.json", manifest)
    try:
        trace, s_hat = execute(cfg, model, algo_cfg)
    except RunAborted as exc:
        write_trace(stem + ".csv", exc.trace, truncated=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    write_trace(stem + ".csv", trace)
    if cfg.algorithm == "missem":
        theta = model.tmap(s_hat)
        observed = model.observed_matrix()
        imputed = impute(model, theta)
        write_imputed(stem + ".imputed.csv", imputed, observed)
        write_trends(stem + ".trends.csv", column_trends(imputed, observed))
    print(f"wrote {stem}.csv ({len(trace)} rows)")
    try:
        print(f"uniform-K summary: {uniform_K_summary(trace):.6g}")
    except ValueError:
        pass
    return EXIT_OK


def cmd_validate(args):
    cfg = load_config(args.config)
    print(cfg.to_text(), end="")
    return EXIT_OK


def cmd_quant_test(args):
    results = quantizer_suite(args.trials, args.vectors, args.max_dim, args.seed)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(
            f"{status} {r.operator} vector={r.vector} q={r.dim} mean_z={r.mean_z:+.2f} "
            f"E|Q|^2={r.second_moment:.6g} bound={r.bound:.6g} mse_z={r.mse_z:+.2f}"
        )
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


def cmd_summarize(args):
    rows, truncated = read_trace(args.trace)
    value = uniform_K_summary(rows, args.burn_in)
    print(f"{value:.12g}" + (" (truncated trace)" if truncated else ""))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "quant-test": cmd_quant_test, "summarize": cmd_summarize}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedSpaceError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
