"""Experiment configuration files.

The format is INI as read by :mod:`configparser` (``key = value`` lines
under ``[section]`` headers, ``#`` comments). Every key is optional
except ``experiment.algorithm``; unknown sections and keys are errors.

``[experiment]``
    ``algorithm`` (fedem, fedem-pp, vr-fedem, naive, exact-em, missem),
    ``seed``, ``output_dir``, ``name``.
``[model]``
    ``kind`` (gmm, missem-synthetic, missem-file). Gaussian mixture:
    ``n_samples``, ``n_workers``, ``split`` (iid, sorted), ``covariance``
    (known, full), ``data_seed``. Synthetic matrix: ``rows``, ``cols``,
    ``rank``, ``observed``, ``noise``, ``n_servers``, ``data_seed``.
    Triplet file: ``path``, ``rank`` and optionally ``rows``, ``cols``.
``[quantizer]``
    ``kind`` (identity, dithering, block), ``levels``, ``r``, ``p_norm``,
    ``blocks`` (comma-separated lengths).
``[algorithm]``
    ``gamma`` (number or ``auto-theorem``), ``alpha`` (number or
    ``auto``), ``p``, ``batch`` (integer or ``full``), ``epochs`` or
    ``k_max`` (FedEM rounds), ``k_out``, ``k_in``, ``v_init``.
``[constants]``
    ``v_min``, ``v_max``, ``L_dotW``, ``L``; used by ``auto-theorem``.
    ``L`` is estimated from the model when omitted.
``[diagnostics]``
    ``diag_every``, ``gap_every``, ``probes``.
"""

import configparser
import io
import os
from dataclasses import dataclass, field

from .compression import KINDS, QuantizerSpec
from .exceptions import ConfigError
from .fedem import gamma_max
from .vrfedem import vr_gamma

ALGORITHMS = ("fedem", "fedem-pp", "vr-fedem", "naive", "exact-em", "missem")
MODEL_KINDS = ("gmm", "missem-synthetic", "missem-file")
OUTPUT_ENV = "FEDSPACE_OUTPUT_DIR"
AUTO_GAMMA = "auto-theorem"


def _int(text):
    value = float(text)
    if value != int(value):
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def _blocks(text):
    return tuple(_int(x) for x in text.split(",") if x.strip())


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"{text!r} is not one of {', '.join(options)}")
        return text

    return parse


def _or(word, parse):
    def inner(text):
        return word if text == word else parse(text)

    return inner


# section -> key -> parser
SCHEMA = {
    "experiment": {
        "algorithm": _choice(*ALGORITHMS),
        "seed": _int,
        "output_dir": str,
        "name": str,
    },
    "model": {
        "kind": _choice(*MODEL_KINDS),
        "n_samples": _int,
        "n_workers": _int,
        "split": _choice("iid", "sorted"),
        "covariance": _choice("known", "full"),
        "data_seed": _int,
        "rows": _int,
        "cols": _int,
        "rank": _int,
        "observed": float,
        "noise": float,
        "n_servers": _int,
        "path": str,
    },
    "quantizer": {
        "kind": _choice(*KINDS),
        "levels": _int,
        "r": float,
        "p_norm": float,
        "blocks": _blocks,
    },
    "algorithm": {
        "gamma": _or(AUTO_GAMMA, float),
        "alpha": _or("auto", float),
        "p": float,
        "batch": _or("full", _int),
        "epochs": float,
        "k_max": _int,
        "k_out": _int,
        "k_in": _int,
        "v_init": _choice("mean-field", "zeros"),
    },
    "constants": {"v_min": float, "v_max": float, "L_dotW": float, "L": float},
    "diagnostics": {"diag_every": _int, "gap_every": _int, "probes": _int},
}

DEFAULTS = {
    "experiment": {"seed": 0, "name": "run"},
    "model": {
        "kind": "gmm",
        "n_samples": 10_000,
        "n_workers": 100,
        "split": "iid",
        "covariance": "known",
        "rows": 100,
        "cols": 50,
        "rank": 2,
        "observed": 0.3,
        "noise": 0.1,
        "n_servers": 10,
    },
    "quantizer": {"kind": "identity"},
    "algorithm": {"gamma": 1e-2, "alpha": "auto", "p": 1.0, "v_init": "mean-field", "k_in": 20},
    "constants": {},
    "diagnostics": {"diag_every": 1, "gap_every": 10, "probes": 100},
}


@dataclass
class ExperimentConfig:
    algorithm: str
    seed: int = 0
    output_dir: str = "."
    name: str = "run"
    model: dict = field(default_factory=dict)
    quantizer: QuantizerSpec = field(default_factory=QuantizerSpec)
    params: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def statistic_dim(self):
        if self.model["kind"] == "gmm":
            return 2 * (1 + 2)
        if "rows" in self.model and "cols" in self.model:
            return self.model["rows"] * self.model["cols"]
        return None

    @property
    def n_agents(self):
        return self.model["n_workers"] if self.model["kind"] == "gmm" else self.model["n_servers"]

    def omega(self, q=None):
        return self.quantizer.omega(q if q is not None else self.statistic_dim)

    def sections(self):
        """Resolved configuration as ``{section: {key: value}}``."""
        qspec = {"kind": self.quantizer.kind}
        if self.quantizer.kind == "dithering":
            qspec.update(levels=self.quantizer.levels, r=self.quantizer.r)
        if self.quantizer.kind == "block":
            qspec["p_norm"] = self.quantizer.p_norm
            if self.quantizer.blocks is not None:
                qspec["blocks"] = self.quantizer.blocks
        return {
            "experiment": {
                "algorithm": self.algorithm,
                "seed": self.seed,
                "output_dir": self.output_dir,
                "name": self.name,
            },
            "model": dict(self.model),
            "quantizer": qspec,
            "algorithm": dict(self.params),
            "constants": dict(self.constants),
            "diagnostics": dict(self.diagnostics),
        }

    def to_text(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name, values in self.sections().items():
            parser[name] = {k: _render(v) for k, v in values.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _render(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text, environ=None):
    """Parse and validate configuration text.

    Raises :class:`ConfigError` listing every problem found, each prefixed
    by its ``section.key`` path.
    """
    environ = os.environ if environ is None else environ
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc
    errors = []
    values = {name: dict(DEFAULTS[name]) for name in SCHEMA}
    given = {name: set() for name in SCHEMA}
    for section in parser.sections():
        if section not in SCHEMA:
            errors.append(f"{section}: unknown section")
            continue
        for key, raw in parser[section].items():
            if key not in SCHEMA[section]:
                errors.append(f"{section}.{key}: unknown key")
                continue
            try:
                values[section][key] = SCHEMA[section][key](raw.strip())
                given[section].add(key)
            except ValueError as exc:
                errors.append(f"{section}.{key}: {exc}")
    if "algorithm" not in given["experiment"]:
        if not any(e.startswith("experiment.algorithm") for e in errors):
            errors.append("experiment.algorithm: required")
        raise ConfigError(errors)
    exp = values["experiment"]
    exp.setdefault("output_dir", environ.get(OUTPUT_ENV, "."))
    # keys that failed to parse keep their defaults so cross-field checks still run
    cfg = _build(values, given, errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def _build(values, given, errors):
    exp, model, algo = values["experiment"], values["model"], values["algorithm"]
    consts, diag = values["constants"], values["diagnostics"]
    name = exp["algorithm"]

    try:
        qkw = {k: v for k, v in values["quantizer"].items()}
        quantizer = QuantizerSpec(**qkw)
    except (ValueError, TypeError) as exc:
        errors.append(f"quantizer: {exc}")
        quantizer = QuantizerSpec()

    kind = model["kind"]
    if name == "missem" and kind == "gmm":
        errors.append("model.kind: experiment.algorithm = missem needs a missem-synthetic or missem-file model")
    if name != "missem" and kind != "gmm":
        errors.append(f"model.kind: {kind} is only valid with experiment.algorithm = missem")
    if kind == "gmm":
        model_out = {k: model[k] for k in ("kind", "n_samples", "n_workers", "split", "covariance")}
        if model["n_workers"] < 1:
            errors.append("model.n_workers: must be >= 1")
        elif model["n_samples"] < 1 or model["n_samples"] % model["n_workers"]:
            errors.append("model.n_samples: must be a positive multiple of model.n_workers")
    elif kind == "missem-synthetic":
        model_out = {k: model[k] for k in ("kind", "rows", "cols", "rank", "observed", "noise", "n_servers")}
        if not 0 < model["observed"] <= 1:
            errors.append("model.observed: must lie in (0, 1]")
        if model["noise"] < 0:
            errors.append("model.noise: must be >= 0")
        if model["n_servers"] < 1:
            errors.append("model.n_servers: must be >= 1")
    else:
        model_out = {"kind": kind, "rank": model["rank"]}
        if "path" not in model:
            errors.append("model.path: required for missem-file")
        else:
            model_out["path"] = model["path"]
        for key in ("rows", "cols"):
            if key in given["model"]:
                model_out[key] = model[key]
    if kind != "gmm" and not 1 <= model["rank"] < min(model["rows"], model["cols"]):
        errors.append("model.rank: must lie in [1, min(rows, cols))")
    model_out["data_seed"] = model.get("data_seed", exp["seed"])

    params = {"gamma": algo["gamma"], "alpha": algo["alpha"]}
    gamma = algo["gamma"]
    if gamma != AUTO_GAMMA and not gamma > 0:
        errors.append("algorithm.gamma: must be > 0")
    if algo["alpha"] != "auto" and not algo["alpha"] > 0:
        errors.append("algorithm.alpha: must be > 0")
    p = algo["p"]
    if name == "fedem-pp" and "p" not in given["algorithm"]:
        p = 0.75
    if not 0 < p <= 1:
        errors.append("algorithm.p: must lie in (0, 1]")
    elif name == "vr-fedem" and p != 1:
        errors.append("algorithm.p: partial participation (p < 1) is incompatible with experiment.algorithm = vr-fedem")
    elif name == "fedem-pp" and p == 1:
        errors.append("algorithm.p: experiment.algorithm = fedem-pp needs p < 1")
    params["p"] = p
    if "batch" in given["algorithm"]:
        batch = algo["batch"]
        if batch != "full" and batch < 1:
            errors.append("algorithm.batch: must be >= 1 or 'full'")
        params["batch"] = batch
    elif name == "missem":
        params["batch"] = 100
    elif name != "vr-fedem":
        params["batch"] = "full"
    if "epochs" in given["algorithm"] and "k_max" in given["algorithm"]:
        errors.append("algorithm.epochs: give either epochs or k_max, not both")
    if "k_max" in given["algorithm"]:
        if name not in ("fedem", "fedem-pp", "naive", "exact-em"):
            errors.append(f"algorithm.k_max: not used by experiment.algorithm = {name}")
        elif algo["k_max"] < 0:
            errors.append("algorithm.k_max: must be >= 0")
        params["k_max"] = algo["k_max"]
    elif name == "vr-fedem" and "k_out" in given["algorithm"]:
        pass
    else:
        epochs = algo.get("epochs", 150.0 if name == "missem" else 50.0)
        if not epochs > 0:
            errors.append("algorithm.epochs: must be > 0")
        params["epochs"] = epochs
    if name == "vr-fedem":
        if "k_out" in given["algorithm"]:
            if algo["k_out"] < 1:
                errors.append("algorithm.k_out: must be >= 1")
            params["k_out"] = algo["k_out"]
        if algo["k_in"] < 0:
            errors.append("algorithm.k_in: must be >= 0")
        params["k_in"] = algo["k_in"]
    elif "k_out" in given["algorithm"] or "k_in" in given["algorithm"]:
        errors.append("algorithm.k_out: loop lengths only apply to experiment.algorithm = vr-fedem")
    params["v_init"] = algo["v_init"]

    for key, val in consts.items():
        if not val > 0:
            errors.append(f"constants.{key}: must be > 0")
    if gamma == AUTO_GAMMA:
        need = ["v_min", "L_dotW"] + (["v_max"] if name == "vr-fedem" else [])
        for key in need:
            if key not in consts:
                errors.append(f"constants.{key}: required by algorithm.gamma = {AUTO_GAMMA}")
        if name in ("exact-em", "missem"):
            errors.append(f"algorithm.gamma: {AUTO_GAMMA} is not defined for experiment.algorithm = {name}")

    for key in ("diag_every", "probes"):
        if diag[key] < 1:
            errors.append(f"diagnostics.{key}: must be >= 1")
    if diag["gap_every"] < 0:
        errors.append("diagnostics.gap_every: must be >= 0")
    if diag["probes"] < 10:
        errors.append("diagnostics.probes: must be >= 10")

    cfg = ExperimentConfig(
        algorithm=name,
        seed=exp["seed"],
        output_dir=exp["output_dir"],
        name=exp["name"],
        model=model_out,
        quantizer=quantizer,
        params=params,
        constants=dict(consts),
        diagnostics=dict(diag),
    )
    if not errors and cfg.statistic_dim is not None:
        try:
            cfg.omega()
        except ValueError as exc:
            errors.append(f"quantizer.blocks: {exc}")
    return cfg


def load_config(path, environ=None):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), environ)


def theorem_gamma(cfg, L=None, q=None):
    """Step size of the convergence theorem for ``cfg``'s algorithm.

    ``L`` overrides ``constants.L`` (e.g. an estimate from the model).
    """
    c = cfg.constants
    L = c.get("L") if L is None else L
    if L is None:
        raise ConfigError(["constants.L: required (or estimated) for algorithm.gamma = auto-theorem"])
    omega = cfg.omega(q)
    n = cfg.n_agents
    if cfg.algorithm == "vr-fedem":
        return vr_gamma(c["v_min"], c["v_max"], c["L_dotW"], L, n, omega)
    return gamma_max(c["v_min"], c["L_dotW"], L, n, omega, cfg.params["p"])


def resolve_alpha(cfg, q=None):
    alpha = cfg.params["alpha"]
    if alpha == "auto":
        return 1.0 / (1 + cfg.omega(q))
    return alpha
