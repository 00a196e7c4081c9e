from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from bhalloc.backtest import BacktestConfig, SamplerConfig, run_backtest
from bhalloc.errors import DataError, ParameterError
from bhalloc.kernels import make_rng
from bhalloc.panel import PanelDataset
from bhalloc.portfolio import PortfolioConstraints
from bhalloc.synthetic import SyntheticTruth, generate_synthetic_panel, month_labels

FAST = SamplerConfig(n_total=400, n_burn=100, seed=1)


def hand_panel(n_months=36):
    rng = make_rng(0)
    returns = np.round(rng.normal(0.01, 0.04, size=(n_months, 3)), 4)
    return PanelDataset(
        dates=month_labels("2001-01", n_months),
        returns=returns,
        chars=np.zeros((n_months, 3, 1)),
        macros=np.zeros((n_months, 0)),
        asset_ids=["a", "b", "c"],
        char_ids=["size"],
        macro_ids=[],
    )


def signal_panel(n_months=132, seed=4, n=5, slope=0.03, sd=0.03):
    b = np.zeros((n, 2))
    b[:, 1] = slope
    sigma = sd**2 * (0.7 * np.eye(n) + 0.3)
    ds, _ = generate_synthetic_panel(SyntheticTruth(b=b, sigma=sigma, n_chars=1, n_macros=0), n_months, seed=seed)
    return ds


def test_equal_weight_returns_are_row_means():
    ds = hand_panel()
    rep = run_backtest(ds, BacktestConfig(window_months=24, strategy="ew"))
    assert rep.decision_dates[0] == ds.dates[23]
    assert rep.realized_dates == list(ds.dates[24:])
    np.testing.assert_allclose(rep.portfolio_returns, ds.returns[24:].mean(axis=1), atol=1e-15)
    np.testing.assert_array_equal(rep.weights, np.full((12, 3), 1 / 3))
    assert rep.metrics["performance"]["overall"]["avg_return"] == pytest.approx(ds.returns[24:].mean(), abs=1e-15)
    assert rep.forecasts is None and "prediction" not in rep.metrics


def test_cumulative_value_identity():
    rep = run_backtest(hand_panel(), BacktestConfig(window_months=24, strategy="ew"))
    v = rep.cumulative_value
    assert v[0] == 1.0 and v.size == rep.portfolio_returns.size + 1
    np.testing.assert_allclose(v[1:] / v[:-1] - 1, rep.portfolio_returns, atol=1e-12)
    assert abs(v[-1] - np.prod(1 + rep.portfolio_returns)) < 1e-12
    assert rep.metrics["cumulative_final"] == pytest.approx(v[-1], abs=1e-12)


def test_moving_average_strategy_uses_window_means():
    ds = hand_panel(48)
    rep = run_backtest(ds, BacktestConfig(window_months=24, strategy="ma", constraints=PortfolioConstraints.none()))
    # first decision at month 23 forecasts with the mean of months 0..23
    np.testing.assert_allclose(rep.forecasts[0], ds.returns[:24].mean(axis=0), atol=1e-15)
    # still in the first refit block: expanding from the window start
    np.testing.assert_allclose(rep.forecasts[5], ds.returns[:29].mean(axis=0), atol=1e-15)
    # second refit moves the window start to month 12
    np.testing.assert_allclose(rep.forecasts[12], ds.returns[12:36].mean(axis=0), atol=1e-15)
    np.testing.assert_array_equal(rep.benchmark, rep.forecasts)
    assert rep.metrics["prediction"]["overall"]["r2_oos"] == 0.0


def test_portfolio_returns_use_previous_weights():
    ds = signal_panel(96)
    rep = run_backtest(ds, BacktestConfig(window_months=60, sampler=FAST, gamma_grid=()))
    np.testing.assert_allclose(rep.portfolio_returns, np.einsum("ti,ti->t", rep.weights, ds.returns[60:]), atol=1e-15)
    assert np.all(rep.weights >= -1e-12) and np.all(rep.weights <= 0.5 + 1e-9)
    np.testing.assert_allclose(rep.weights.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.abs(np.diff(rep.weights, axis=0)).sum(axis=1) <= 0.5 + 1e-8)
    assert len(rep.fits) == 3 and rep.fits[1]["window"] == [ds.dates[12], ds.dates[71]]


def test_weights_held_between_rebalances():
    ds = signal_panel(96)
    rep = run_backtest(ds, BacktestConfig(window_months=60, rebalance_every_months=3, sampler=FAST, gamma_grid=()))
    for j in range(rep.weights.shape[0]):
        if j % 3:
            np.testing.assert_array_equal(rep.weights[j], rep.weights[j - 1])


def test_predictive_signal_is_exploited():
    ds = signal_panel()
    cfg = BacktestConfig(window_months=60, sampler=SamplerConfig(n_total=600, n_burn=200, seed=1))
    bh = run_backtest(ds, cfg)
    ew = run_backtest(ds, BacktestConfig(window_months=60, strategy="ew"))
    assert bh.metrics["prediction"]["overall"]["r2_oos"] > 0
    assert bh.metrics["performance"]["overall"]["sharpe_annualized"] > ew.metrics["performance"]["overall"]["sharpe_annualized"]
    assert set(bh.metrics["gamma_sensitivity"]) == {"5.0", "2.0", "10.0"}


def test_no_signal_gives_near_zero_r2():
    n = 10
    truth = SyntheticTruth(b=np.zeros((n, 2)), sigma=0.05**2 * np.eye(n), n_chars=1, n_macros=0)
    ds, _ = generate_synthetic_panel(truth, 560, seed=5)
    cfg = BacktestConfig(window_months=60, sampler=SamplerConfig(n_total=600, n_burn=200, seed=1), gamma_grid=())
    rep = run_backtest(ds, cfg)
    assert rep.forecasts.size == 5000
    assert abs(rep.metrics["prediction"]["overall"]["r2_oos"]) <= 0.02


def test_deterministic_and_byte_identical(tmp_path):
    ds = signal_panel(96)
    cfg = BacktestConfig(window_months=60, sampler=FAST)
    a, b = run_backtest(ds, cfg), run_backtest(ds, cfg)
    assert a.to_json() == b.to_json()
    np.testing.assert_array_equal(a.weights, b.weights)
    pa, pb = a.write(tmp_path / "a"), b.write(tmp_path / "b")
    for key in pa:
        assert pa[key].read_bytes() == pb[key].read_bytes()


def test_parallel_refits_match_serial():
    ds = signal_panel(96)
    serial = run_backtest(ds, BacktestConfig(window_months=60, sampler=FAST, jobs=1))
    parallel = run_backtest(ds, BacktestConfig(window_months=60, sampler=FAST, jobs=2))
    assert serial.to_json() == parallel.to_json()
    np.testing.assert_array_equal(serial.forecasts, parallel.forecasts)


def test_no_look_ahead():
    ds = signal_panel(96)
    cut = 75
    r = ds.returns.copy()
    z = ds.chars.copy()
    r[cut + 1 :] += 0.5
    z[cut + 1 :] *= -1
    perturbed = PanelDataset(ds.dates, r, z, ds.macros, ds.asset_ids, ds.char_ids, ds.macro_ids)
    cfg = BacktestConfig(window_months=60, sampler=FAST)
    a, b = run_backtest(ds, cfg), run_backtest(perturbed, cfg)
    k = cut - 59 + 1  # decisions at months 59..cut
    assert a.decision_dates[k - 1] == ds.dates[cut]
    np.testing.assert_array_equal(a.weights[:k], b.weights[:k])
    np.testing.assert_array_equal(a.forecasts[:k], b.forecasts[:k])
    np.testing.assert_array_equal(a.intervals.upper[:k], b.intervals.upper[:k])
    assert not np.array_equal(a.weights[k:], b.weights[k:])


def test_report_files(tmp_path):
    ds = signal_panel(96)
    rep = run_backtest(ds, BacktestConfig(window_months=60, sampler=FAST, gamma_grid=()))
    paths = rep.write(tmp_path)
    weights = pd.read_csv(paths["weights"])
    assert list(weights.columns) == ["date", "asset", "weight"] and len(weights) == 36 * 5
    cum = pd.read_csv(paths["cumulative"], float_precision="round_trip")
    assert cum["date"].iloc[0] == ds.dates[59] and cum["value"].iloc[0] == 1.0
    np.testing.assert_allclose(cum["value"].to_numpy(), rep.cumulative_value, rtol=0, atol=0)
    fc = pd.read_csv(paths["forecasts"])
    assert (fc["lower"] <= fc["forecast"]).all() and (fc["forecast"] <= fc["upper"]).all()
    report = json.loads(paths["report"].read_text())
    assert report["format"] == "bhalloc.backtest_report/1"
    assert report["config"]["sampler_draws"] == {"n_total": 400, "n_burn": 100}
    assert "jobs" not in report["config"]


def test_subperiods_factors_and_anomalies():
    ds = signal_panel(96)
    rng = make_rng(9)
    months = list(ds.dates)
    factors = pd.DataFrame(rng.normal(0.005, 0.04, size=(96, 5)), index=months, columns=["mkt", "smb", "hml", "rmw", "cma"])
    factors["rf"] = 0.001
    anomalies = pd.DataFrame(rng.normal(0.0, 0.03, size=(96, 2)), index=months, columns=["mom", "val"])
    cfg = BacktestConfig(window_months=60, sampler=FAST, gamma_grid=(), subperiod_splits=(ds.dates[78],), hac_lags=3)
    rep = run_backtest(ds, cfg, factors=factors, anomalies=anomalies)
    perf = rep.metrics["performance"]
    assert list(perf) == ["overall", f"{ds.dates[60]}..{ds.dates[77]}", f"{ds.dates[78]}..{ds.dates[95]}"]
    assert perf["overall"]["n_months"] == 36 and sum(perf[k]["n_months"] for k in list(perf)[1:]) == 36
    assert set(perf["overall"]["factor_models"]) == {"CAPM", "FF3", "FF5"}
    capm = perf["overall"]["factor_models"]["CAPM"]
    assert perf["overall"]["jensen_alpha"] == capm["alpha"]
    assert capm["cov_type"] == "newey-west(3)"
    excess = rep.portfolio_returns - 0.001
    ols = np.polyfit(factors.loc[rep.realized_dates, "mkt"], excess, 1)
    assert capm["alpha"] == pytest.approx(ols[1], abs=1e-12)
    assert set(rep.metrics["anomaly_pricing"]) == {"strategy", "CAPM", "FF3", "FF5"}
    assert set(rep.metrics["prediction"]) == set(perf)
    with pytest.raises(DataError, match="factor returns"):
        run_backtest(ds, cfg, factors=factors.iloc[:-1])


def test_insufficient_history_and_bad_config():
    with pytest.raises(DataError, match="36"):
        run_backtest(hand_panel(35), BacktestConfig(window_months=24, strategy="ew"))
    with pytest.raises(ParameterError):
        BacktestConfig(gamma=0.0)
    with pytest.raises(ParameterError):
        BacktestConfig(window_months=12)
    with pytest.raises(ParameterError):
        BacktestConfig(rebalance_every_months=5)
    with pytest.raises(ParameterError):
        BacktestConfig(strategy="momentum")
