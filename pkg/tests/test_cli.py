from __future__ import annotations

import json
import logging
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from bhalloc.cli import main
from bhalloc.panel import load_panel
from bhalloc.synthetic import draw_truth, generate_synthetic_panel

FAST = ["--n-total", "400", "--n-burn", "100"]


def run(*argv):
    return main([str(a) for a in argv])


def tree(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*"))


def read_error(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)["error"]


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    assert run("generate", "--out", root / "panel", "--seed", 11, "--n-assets", 5, "--n-chars", 3, "--n-macros", 2, "--n-months", 300, "--quiet") == 0
    return root / "panel"


def test_generate_round_trips_losslessly(generated):
    ds = load_panel(generated / "returns.csv", generated / "chars.csv", generated / "macros.csv", standardize=False)
    truth = draw_truth(5, 3, 2, seed=11)
    ref, _ = generate_synthetic_panel(truth, 300, seed=11)
    np.testing.assert_array_equal(ds.returns, ref.returns)
    np.testing.assert_array_equal(ds.chars, ref.chars)
    np.testing.assert_array_equal(ds.macros, ref.macros)
    assert ds.dates == ref.dates and ds.asset_ids == ref.asset_ids
    stored = json.loads((generated / "truth.json").read_text())
    np.testing.assert_array_equal(np.asarray(stored["b"]), truth.b)


def test_generate_repeated_seed_identical_files(tmp_path, generated):
    assert run("generate", "--out", tmp_path, "--seed", 11, "--n-assets", 5, "--n-chars", 3, "--n-macros", 2, "--n-months", 300, "--quiet") == 0
    for name in ("returns.csv", "chars.csv", "macros.csv", "truth.json", "run_config.json"):
        assert (tmp_path / name).read_bytes() == (generated / name).read_bytes()


def test_generate_single_asset_panel(tmp_path):
    assert run("generate", "--out", tmp_path, "--n-assets", 1, "--n-chars", 1, "--n-macros", 1, "--n-months", 30, "--quiet") == 0
    ds = load_panel(tmp_path / "returns.csv", tmp_path / "chars.csv", tmp_path / "macros.csv")
    assert ds.returns.shape == (30, 1) and ds.chars.shape == (30, 1, 1)


def test_fit_reports_mixing_and_is_deterministic(tmp_path):
    assert run("generate", "--out", tmp_path / "gen", "--seed", 7, "--quiet") == 0
    assert run("fit", "--data-dir", tmp_path / "gen", "--out", tmp_path / "a", "--seed", 7, "--quiet") == 0
    diag = json.loads((tmp_path / "a" / "diagnostics.json").read_text())
    assert diag["min_ess_ratio"] > 0.6 and diag["n_draws"] == 2000
    trace = pd.read_csv(tmp_path / "a" / "trace.csv")
    assert list(trace.columns) == ["iteration", "parameter", "value"]
    assert trace["iteration"].min() == 1000 and trace["iteration"].nunique() == 2000
    assert trace["parameter"].nunique() == diag["n_monitored"]
    assert run("fit", "--data-dir", tmp_path / "gen", "--out", tmp_path / "b", "--seed", 7, "--quiet") == 0
    assert (tmp_path / "a" / "fitted_model.json").read_bytes() == (tmp_path / "b" / "fitted_model.json").read_bytes()
    assert run("diagnose", "--trace", tmp_path / "a" / "trace.csv", "--out", tmp_path / "d", "--quiet") == 0
    again = json.loads((tmp_path / "d" / "diagnostics.json").read_text())
    assert again["min_ess_ratio"] == pytest.approx(diag["min_ess_ratio"], rel=1e-12)


def test_missing_data_file_exits_2_naming_path(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "returns.csv"
    code = run("fit", "--returns", missing, "--chars", missing, "--macros", missing, "--out", tmp_path / "o")
    assert code == 2
    err = read_error(capsys)
    assert err["exit_code"] == 2 and str(missing) in err["message"]


def test_bad_gamma_exits_2(tmp_path, generated, capsys):
    assert run("backtest", "--data-dir", generated, "--gamma", "-1", "--out", tmp_path) == 2
    err = read_error(capsys)
    assert "gamma" in err["message"] and err["type"] == "ParameterError"
    assert run("backtest", "--data-dir", generated, "--gamma", "0", "--out", tmp_path) == 2


def test_data_error_exit_code(tmp_path, generated, capsys):
    bad = tmp_path / "returns.csv"
    bad.write_text("date,asset,excess_return\n2000-13,a,0.1\n")
    code = run("fit", "--returns", bad, "--chars", generated / "chars.csv", "--macros", generated / "macros.csv", "--out", tmp_path / "o")
    assert code == 3
    assert "row 2" in read_error(capsys)["message"]


def test_backtest_equal_weight_mean(tmp_path, generated):
    assert run("backtest", "--data-dir", generated, "--strategy", "ew", "--out", tmp_path, "--quiet") == 0
    report = json.loads((tmp_path / "report.json").read_text())
    rets = pd.read_csv(generated / "returns.csv", float_precision="round_trip")
    wide = rets.pivot(index="date", columns="asset", values="excess_return").to_numpy()
    hand = wide[252:].mean(axis=1).mean()
    assert report["metrics"]["performance"]["overall"]["avg_return"] == pytest.approx(hand, abs=1e-15)
    assert (tmp_path / "weights.csv").exists() and (tmp_path / "cumulative.csv").exists()


def test_backtest_bh_records_sampler_defaults(tmp_path, generated):
    assert run("backtest", "--data-dir", generated, "--out", tmp_path, "--jobs", 1, "--quiet") == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["config"]["sampler_draws"] == {"n_total": 3000, "n_burn": 1000}
    assert report["config"]["strategy"] == "bh"
    assert len(report["fits"]) == 4 and report["metrics"]["prediction"]["overall"]["r2_oos"] is not None


def test_replay_is_byte_identical_and_confined_to_out(tmp_path, generated, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = tree(generated)
    assert run("backtest", "--data-dir", generated, "--out", "first", "--window", 60, *FAST, "--jobs", 1, "--quiet") == 0
    assert tree(tmp_path) == ["first"] + sorted(f"first/{p}" for p in tree(tmp_path / "first"))
    assert tree(generated) == before
    assert run("backtest", "--config", "first/run_config.json", "--out", "second", "--quiet") == 0
    assert tree(tmp_path / "first") == tree(tmp_path / "second")
    for name in tree(tmp_path / "first"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes(), name


def test_config_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 3, "generate": {"n_assets": 4, "n_months": 40}}))
    assert run("generate", "--config", cfg, "--n-assets", 2, "--out", tmp_path / "o", "--quiet") == 0
    rc = json.loads((tmp_path / "o" / "run_config.json").read_text())
    assert rc["seed"] == 3 and rc["generate"]["n_assets"] == 2 and rc["generate"]["n_months"] == 40
    assert rc["generate"]["n_chars"] == 3  # default
    cfg.write_text(json.dumps({"generate": {"n_asets": 4}}))
    assert run("generate", "--config", cfg, "--out", tmp_path / "p", "--quiet") == 2
    cfg.write_text(json.dumps({"command": "fit"}))
    assert run("generate", "--config", cfg, "--out", tmp_path / "q", "--quiet") == 2


def test_predict_from_fitted_model(tmp_path, generated):
    assert run("fit", "--data-dir", generated, "--out", tmp_path / "fit", *FAST, "--end", "2020-12", "--quiet") == 0
    model = tmp_path / "fit" / "fitted_model.json"
    assert run("predict", "--data-dir", generated, "--model", model, "--date", "2020-12", "--out", tmp_path / "p", "--quiet") == 0
    pred = pd.read_csv(tmp_path / "p" / "predictions.csv", float_precision="round_trip")
    info = json.loads((tmp_path / "p" / "predictive.json").read_text())
    assert list(pred["asset"]) == info["asset_ids"] and len(pred) == 5
    np.testing.assert_allclose(pred["mean"], info["mean"], rtol=0)
    np.testing.assert_allclose(pred["sd_total"] ** 2, np.diag(info["cov_total"]), rtol=1e-12)
    assert (pred["lower"] < pred["lower_param"]).all() and (pred["upper_param"] < pred["upper"]).all()


def test_main_restores_logger_state(tmp_path):
    logger = logging.getLogger("bhalloc")
    before = (list(logger.handlers), logger.level, logger.propagate)
    assert run("generate", "--out", tmp_path, "--n-months", 30, "--quiet") == 0
    assert (list(logger.handlers), logger.level, logger.propagate) == before


def test_quiet_and_logging(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "bhalloc", "generate", "--out", str(tmp_path / "a"), "--n-months", "30"],
        capture_output=True, text=True, check=True,
    )
    assert "INFO [bhalloc.cli]" in proc.stderr
    quiet = subprocess.run(
        [sys.executable, "-m", "bhalloc", "generate", "--out", str(tmp_path / "b"), "--n-months", "30", "--quiet"],
        capture_output=True, text=True, check=True,
    )
    assert quiet.stderr == "" and quiet.stdout == ""
    usage = subprocess.run([sys.executable, "-m", "bhalloc", "fit"], capture_output=True, text=True)
    assert usage.returncode == 2
