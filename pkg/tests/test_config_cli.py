import json
import math
from pathlib import Path

import pytest

from fedspace import cli
from fedspace.config import AUTO_GAMMA, OUTPUT_ENV, load_config, parse_config, resolve_alpha, theorem_gamma
from fedspace.exceptions import ConfigError, RunAborted
from fedspace.fedem import gamma_max
from fedspace.trace import TRUNCATION_MARKER, read_trace
from fedspace.vrfedem import vr_gamma

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL_FEDEM = """
[experiment]
algorithm = fedem-pp
seed = 3
name = small

[model]
kind = gmm
n_samples = 400
n_workers = 8

[quantizer]
kind = block
blocks = 2,4

[algorithm]
gamma = 0.05
alpha = 0.5
batch = 5
k_max = 30
"""

SMALL_VR = """
[experiment]
algorithm = vr-fedem
name = vr

[model]
n_samples = 400
n_workers = 8

[quantizer]
kind = dithering
levels = 2

[algorithm]
k_out = 3
k_in = 4
"""

SMALL_MISSEM = """
[experiment]
algorithm = missem
name = mm

[model]
kind = missem-synthetic
rows = 12
cols = 10
observed = 0.5
n_servers = 3

[algorithm]
gamma = 1
batch = 5
epochs = 5
"""


def write(tmp_path, text, name="c.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# -- parsing ---------------------------------------------------------------------


def test_minimal_config_defaults():
    cfg = parse_config("[experiment]\nalgorithm = fedem\n", environ={})
    assert cfg.model["kind"] == "gmm" and cfg.model["n_workers"] == 100
    assert cfg.params["batch"] == "full" and cfg.params["epochs"] == 50.0
    assert cfg.quantizer.kind == "identity" and cfg.output_dir == "."
    assert resolve_alpha(cfg, 6) == 1.0


def test_manifest_round_trip():
    cfg = parse_config(SMALL_FEDEM, environ={})
    again = parse_config(cfg.to_text(), environ={})
    assert again.sections() == cfg.sections()


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.ini")), ids=lambda p: p.name)
def test_committed_configs_validate(path):
    cfg = load_config(path, environ={})
    assert parse_config(cfg.to_text(), environ={}).sections() == cfg.sections()


def test_vr_partial_participation_names_both_keys():
    with pytest.raises(ConfigError) as err:
        parse_config(SMALL_VR + "p = 0.5\n", environ={})
    msg = " ".join(err.value.errors)
    assert "algorithm.p" in msg and "experiment.algorithm" in msg


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError) as err:
        parse_config("[experiment]\nalgorithm = fedem\ncolour = red\n[extras]\nx = 1\n", environ={})
    assert len(err.value.errors) == 2


def test_all_errors_reported():
    text = "[experiment]\nalgorithm = fedem\n[algorithm]\ngamma = -1\np = 2\nbatch = x\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text, environ={})
    keys = {e.split(":")[0] for e in err.value.errors}
    assert {"algorithm.gamma", "algorithm.p", "algorithm.batch"} <= keys


def test_algorithm_required():
    with pytest.raises(ConfigError) as err:
        parse_config("[model]\nkind = gmm\n", environ={})
    assert err.value.errors == ["experiment.algorithm: required"]


def test_fedem_pp_default_p():
    cfg = parse_config("[experiment]\nalgorithm = fedem-pp\n", environ={})
    assert cfg.params["p"] == 0.75


def test_auto_theorem_matches_calculators():
    text = SMALL_FEDEM.replace("gamma = 0.05", f"gamma = {AUTO_GAMMA}") + "\n[constants]\nv_min = 1\nL_dotW = 2\nL = 3\n"
    cfg = parse_config(text, environ={})
    assert theorem_gamma(cfg, q=6) == gamma_max(1, 2, 3, 8, 1.0, 0.75)
    vr_text = SMALL_VR + f"gamma = {AUTO_GAMMA}\n[constants]\nv_min = 1\nv_max = 2\nL_dotW = 2\nL = 3\n"
    vr = parse_config(vr_text, environ={})
    omega = vr.quantizer.omega(6)
    assert theorem_gamma(vr, q=6) == vr_gamma(1, 2, 2, 3, 8, omega)


def test_auto_theorem_needs_constants():
    with pytest.raises(ConfigError) as err:
        parse_config(SMALL_FEDEM.replace("gamma = 0.05", f"gamma = {AUTO_GAMMA}"), environ={})
    assert any("constants.v_min" in e for e in err.value.errors)


def test_output_dir_from_environment():
    cfg = parse_config("[experiment]\nalgorithm = fedem\n", environ={OUTPUT_ENV: "/tmp/out"})
    assert cfg.output_dir == "/tmp/out"


def test_model_algorithm_mismatch():
    with pytest.raises(ConfigError):
        parse_config("[experiment]\nalgorithm = missem\n", environ={})
    with pytest.raises(ConfigError):
        parse_config("[experiment]\nalgorithm = fedem\n[model]\nkind = missem-synthetic\n", environ={})


# -- command line ----------------------------------------------------------------


def test_validate_good_and_bad(tmp_path, capsys):
    assert cli.main(["validate", write(tmp_path, SMALL_FEDEM)]) == 0
    assert "[algorithm]" in capsys.readouterr().out
    bad = write(tmp_path, SMALL_VR + "p = 0.5\ngamma = 0\n", "bad.ini")
    assert cli.main(["validate", bad]) == 2
    err = capsys.readouterr().err
    assert "algorithm.p" in err and "algorithm.gamma" in err


def test_missing_file_is_runtime_error(tmp_path):
    assert cli.main(["validate", str(tmp_path / "nope.ini")]) == 1


def _run(tmp_path, text, sub, *extra):
    out = tmp_path / sub
    assert cli.main(["run", write(tmp_path, text), "--output-dir", str(out), *extra]) == 0
    return out


def test_run_is_byte_identical(tmp_path):
    name = "small"
    a = _run(tmp_path, SMALL_FEDEM, "a")
    b = _run(tmp_path, SMALL_FEDEM, "b")
    c = _run(tmp_path, SMALL_FEDEM, "c", "--workers-parallel")
    blobs = [(d / f"{name}.csv").read_bytes() for d in (a, b, c)]
    assert blobs[0] == blobs[1] == blobs[2]
    rows, truncated = read_trace(a / f"{name}.csv")
    assert len(rows) == 30 and not truncated
    manifest = json.loads((a / f"{name}.manifest.json").read_text())
    assert manifest["resolved"]["gamma"] == 0.05


def test_run_vr_and_summarize(tmp_path, capsys):
    out = _run(tmp_path, SMALL_VR, "vr", "--workers-parallel")
    rows, _ = read_trace(out / "vr.csv")
    assert len(rows) == 1 + 3 * 4
    capsys.readouterr()
    assert cli.main(["summarize", str(out / "vr.csv")]) == 0
    value = float(capsys.readouterr().out.split()[0])
    assert math.isfinite(value) and value >= 0


def test_run_missem_outputs(tmp_path):
    out = _run(tmp_path, SMALL_MISSEM, "mm")
    assert (out / "mm.imputed.csv").read_text().splitlines()[0] == "row,col,value,observed"
    trends = (out / "mm.trends.csv").read_text().splitlines()
    assert trends[0] == "col,total,missing" and len(trends) == 11


def test_run_exact_em_and_naive(tmp_path):
    for algo in ("exact-em", "naive"):
        text = f"[experiment]\nalgorithm = {algo}\nname = {algo}\n[model]\nn_samples = 200\nn_workers = 4\n[algorithm]\nepochs = 3\n"
        out = _run(tmp_path, text, algo)
        rows, _ = read_trace(out / f"{algo}.csv")
        assert len(rows) == 3 and rows[0].algo == algo


def test_run_honours_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.main(["run", write(tmp_path, SMALL_FEDEM)]) == 0
    assert (tmp_path / "env" / "small.csv").exists()


def test_aborted_run_flushes_truncated_trace(tmp_path, monkeypatch):
    real = cli.run_fedem

    def failing(model, config, s0, algo="fedem"):
        partial = real(model, config.__class__(**{**config.__dict__, "k_max": 2}), s0, algo=algo).trace
        raise RunAborted(partial, FloatingPointError("overflow"))

    monkeypatch.setattr(cli, "run_fedem", failing)
    out = tmp_path / "abort"
    assert cli.main(["run", write(tmp_path, SMALL_FEDEM), "--output-dir", str(out)]) == 1
    rows, truncated = read_trace(out / "small.csv")
    assert truncated and len(rows) == 2
    assert (out / "small.csv").read_text().splitlines()[-1].startswith(TRUNCATION_MARKER)


def test_quant_test_command(capsys):
    assert cli.main(["quant-test", "--trials", "4000", "--vectors", "3", "--max-dim", "8"]) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith("12/12 checks passed")
