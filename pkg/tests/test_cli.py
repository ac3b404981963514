import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from pipecomp import cli
from pipecomp import harness as hn
from pipecomp import quadratic as qd

SMALL = {
    "name": "tiny",
    "dataset": {"kind": "gaussian_blobs", "n_samples": 80, "n_features": 3, "n_classes": 2, "noise": 0.3},
    "model": {"layers": [3, 5, 2]},
    "optimizer": {"eta": 0.02, "momentum": 0.9, "mitigation": {"method": "lwp_plus_gsc"}},
    "pipeline": {"runner": "pb"},
    "steps": 60, "seeds": [0, 1],
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(SMALL))
    return p


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_util_pipeline(capsys):
    assert cli.main(["util", "--pipeline", "N=1", "S=50"]) == 0
    assert capsys.readouterr().out.strip() == "0.009901"


def test_util_dp(capsys):
    assert cli.main(["util", "--dp", "flop=1e9", "sps=100", "peak=1e12"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.1)
    assert cli.main(["util", "--dp", "flop=1e9", "sps=1e4", "peak=1e12"]) == 1


@pytest.mark.parametrize("argv", [["util", "--pipeline", "N=1"], ["util", "--pipeline", "N=x", "S=2"],
                                  ["quad-heatmap"], ["nonsense"], ["pb-train"], ["quad-sweep", "--delay", "two"]])
def test_bad_flags_exit_2(argv, capsys):
    assert cli.main(argv) == 2
    assert capsys.readouterr().err


def test_missing_config_names_file(capsys):
    assert cli.main(["pb-train", "--config", "missing.json"]) == 2
    assert "missing.json" in capsys.readouterr().err


def test_invalid_config_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({**SMALL, "extra": 1}))
    assert cli.main(["train", "--config", str(p)]) == 2
    assert "'extra'" in capsys.readouterr().err


def test_runtime_failure_exit_1(config, monkeypatch, tmp_path):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(hn, "run_experiment", boom)
    assert cli.main(["train", "--config", str(config), "--out", str(tmp_path)]) == 1


def test_quad_heatmap_cells_match_library(tmp_path, capsys):
    out = tmp_path / "d"
    assert cli.main(["quad-heatmap", "--method", "gdm", "--delay", "1", "--n-m", "6", "--n-el", "5",
                     "--out", str(out)]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 1
    rows = _rows(out / "heatmap_gdm_D1.csv")
    assert list(rows[0]) == ["m", "eta_lambda", "r_max", "stable"]
    assert len(rows) == 30
    for r in rows:
        rec = qd.QuadraticRecurrence("gdm", float(r["m"]), float(r["eta_lambda"]), 1)
        expect = qd.max_root_magnitude(qd.char_poly(rec)).r_max
        assert float(r["r_max"]) == pytest.approx(expect, rel=1e-9)
        assert (r["stable"] == "True") == (expect < 1.0)
    side = json.loads((out / "heatmap_gdm_D1.json").read_text())
    assert len(side["search_spec"]["m_grid"]) == 6


def test_quad_sweep_and_halflife(tmp_path):
    assert cli.main(["quad-sweep", "--delay", "2", "--kappa", "100", "--n-m", "8", "--n-eta", "40",
                     "--n-lambda", "40", "--t-scales", "0,1,2", "--out", str(tmp_path)]) == 0
    rows = _rows(tmp_path / "sweep_lwp_k100_D2.csv")
    assert list(rows[0])[:4] == ["m", "T_scale", "half_life", "stable"]
    assert len(rows) == 24
    side = json.loads((tmp_path / "sweep_lwp_k100_D2.json").read_text())
    assert side["search_spec"]["n_eta"] == 40
    assert cli.main(["quad-halflife", "--method", "gdm", "--kappa", "1000", "--delays", "0",
                     "--out", str(tmp_path)]) == 0
    (row,) = _rows(tmp_path / "halflife_k1000.csv")
    assert float(row["half_life"]) == pytest.approx(qd.half_life(qd.heavy_ball_rate(1e3)), rel=0.05)


def test_pb_train_writes_artifacts(config, tmp_path, capsys):
    out = tmp_path / "o"
    assert cli.main(["pb-train", "--config", str(config), "--out", str(out), "--seed", "5"]) == 0
    assert "tiny" in capsys.readouterr().out
    names = sorted(p.name for p in out.iterdir())
    assert names == ["tiny.config.json", "tiny.summary.json", "tiny_seed5.config.json", "tiny_seed5.eval.csv",
                     "tiny_seed5.trace.csv"]
    assert json.loads((out / "tiny.summary.json").read_text())["seeds"] == [5]


def test_delay_train_override_and_env_out(config, tmp_path, monkeypatch):
    monkeypatch.setenv(hn.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["delay-train", "--config", str(config), "--delay", "3", "--steps", "20"]) == 0
    snap = json.loads((tmp_path / "env" / "tiny.config.json").read_text())
    assert snap["pipeline"] == {"runner": "delay", "delay": 3}
    assert snap["steps"] == 20


def test_divergence_gives_nonzero_exit(tmp_path):
    d = {**SMALL, "dataset": {"kind": "quadratic_regression", "n_samples": 50, "n_features": 3, "n_classes": 2},
         "model": {"layers": [3, 2], "loss": "mean_squared_error"},
         "optimizer": {"eta": 3.0}, "pipeline": {"runner": "sgdm"}, "steps": 300}
    p = tmp_path / "div.json"
    p.write_text(json.dumps(d))
    assert cli.main(["train", "--config", str(p), "--out", str(tmp_path)]) == cli.EXIT_DIVERGED


def test_sweep_command(config, tmp_path, capsys):
    assert cli.main(["sweep", "--config", str(config), "--param", "optimizer.momentum", "--values", "0.0,0.5",
                     "--out", str(tmp_path)]) == 0
    rows = hn.read_rows(tmp_path / "tiny.sweep_optimizer_momentum.csv")
    assert [r["value"] for r in rows] == [0.0, 0.5]
    assert cli.main(["sweep", "--config", str(config), "--param", "optimizer.nope", "--values", "1",
                     "--out", str(tmp_path)]) == 2


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "pipecomp.cli", "util", "--pipeline", "N=4", "S=4"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert float(res.stdout) == pytest.approx(1 / 3, abs=1e-6)
    assert np.isclose(float(res.stdout), 0.333333)
