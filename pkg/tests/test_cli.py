import os
import subprocess
import sys

import pytest

from deepimv.cli import KEYS, UsageError, format_config, parse_config, run

SMALL = [
    "n_samples=120", "n_views=3", "n_factors=6", "view_dim=5", "epochs=3", "lr=0.003",
    "latent_dim=4", "encoder_hidden=8", "predictor_hidden=8", "dropout=0.1", "repeats=1",
]


def cli(tmp_path, command, *extra):
    args = [command, "--output-dir", str(tmp_path / "out"), "-q", "--set", f"data_dir={tmp_path / 'data'}"]
    for item in SMALL + list(extra):
        args += ["--set", item]
    return run(args)


# ---------------------------------------------------------------- parse_config


def test_empty_document_gives_defaults():
    cfg = parse_config("")
    assert cfg["alpha"] == 1.0 and cfg["beta"] == 0.01
    assert cfg["lr"] == 1e-4 and cfg["dropout"] == 0.7 and cfg["split"] == (0.64, 0.16, 0.20)
    assert set(cfg) == set(KEYS)


def test_range_type_and_unknown_key_errors_name_the_key():
    with pytest.raises(UsageError, match="'beta'.*range"):
        parse_config("beta = -1")
    with pytest.raises(UsageError, match="'epochs'"):
        parse_config("epochs = many")
    with pytest.raises(UsageError, match="'colour'"):
        parse_config("colour = blue")
    with pytest.raises(UsageError, match="line 2"):
        parse_config("# comment\nno equals sign")


def test_override_round_trips_through_echo():
    cfg = parse_config("fusion = moe\nencoder_hidden = 10, 20  # trailing comment\nbeta_v = 0.1,0.2")
    again = parse_config(format_config(cfg))
    assert again == cfg
    assert again["fusion"] == "moe" and again["encoder_hidden"] == (10, 20)


# ---------------------------------------------------------------- run


def test_synth_train_eval_predict_project(tmp_path):
    out = tmp_path / "out"
    assert cli(tmp_path, "synth") == 0
    before = {p: p.read_bytes() for p in (tmp_path / "data").iterdir()}
    assert cli(tmp_path, "train") == 0
    assert (out / "checkpoint.json").exists() and (out / "history.csv").exists()
    assert (out / "metrics.csv").read_text().startswith("split,auroc_mean")
    assert cli(tmp_path, "eval") == 0
    assert "n_views" in (out / "metrics.csv").read_text()
    assert cli(tmp_path, "predict", "views=1,3") == 0
    lines = (out / "predictions.csv").read_text().splitlines()
    assert lines[0] == "id,p_0,p_1" and len(lines) == 121
    assert cli(tmp_path, "project", "views=2") == 0
    assert (out / "projection.csv").read_text().startswith("id,label,pc1,pc2")
    assert "fusion = poe" in (out / "config.txt").read_text()
    # inputs are never modified
    assert before == {p: p.read_bytes() for p in (tmp_path / "data").iterdir()}


def test_rerunning_echoed_config_reproduces_outputs(tmp_path):
    assert cli(tmp_path, "synth") == 0
    assert cli(tmp_path, "train") == 0
    out = tmp_path / "out"
    first = {n: (out / n).read_bytes() for n in ("history.csv", "metrics.csv", "checkpoint.json")}
    echo = tmp_path / "echo.txt"
    echo.write_text((out / "config.txt").read_text())
    assert run(["train", "--config", str(echo), "-q"]) == 0
    assert first == {n: (out / n).read_bytes() for n in first}


def test_ablate_and_sweep_write_reports(tmp_path):
    assert cli(tmp_path, "synth") == 0
    assert cli(tmp_path, "ablate", "missing_rate=0.5") == 0
    assert (tmp_path / "out" / "ablation.csv").read_text().count("\n") == 1 + 4 * 3
    assert cli(tmp_path, "sweep", "rates=0,0.9") == 0
    assert (tmp_path / "out" / "sweep_long.csv").exists()


def test_gradcheck_command(tmp_path):
    assert run(["gradcheck", "--output-dir", str(tmp_path), "-q"]) == 0
    assert (tmp_path / "gradcheck.csv").read_text().splitlines()[1].endswith(",1")


def test_exit_codes(tmp_path, capsys):
    assert run(["frobnicate"]) == 1
    assert "synth, train" in capsys.readouterr().err
    assert run(["train", "--set", "beta=-1", "--output-dir", str(tmp_path)]) == 1
    assert run(["train", "--set", "nonsense=1", "--output-dir", str(tmp_path)]) == 1
    assert run(["train", "--output-dir", str(tmp_path)]) == 1  # data_dir missing
    assert run(["eval", "--set", f"data_dir={tmp_path / 'none'}", "--output-dir", str(tmp_path)]) == 2
    assert run(["train", "--config", str(tmp_path / "none.txt")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path):
    assert cli(tmp_path, "synth") == 0
    # a learning rate this large overflows the logits within a few steps
    assert cli(tmp_path, "train", "lr=1e300", "epochs=20") == 3


def test_output_dir_environment_override(tmp_path, monkeypatch):
    monkeypatch.setenv("DEEPIMV_OUTPUT_DIR", str(tmp_path / "env"))
    assert run(["gradcheck", "-q"]) == 0
    assert (tmp_path / "env" / "gradcheck.csv").exists()


def test_console_script_installed(tmp_path):
    exe = os.path.join(os.path.dirname(sys.executable), "deepimv")
    cmd = [exe] if os.path.exists(exe) else [sys.executable, "-m", "deepimv.cli"]
    res = subprocess.run(cmd + ["gradcheck", "-q", "--output-dir", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
