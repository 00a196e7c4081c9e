"""Rolling-window re-estimation and monthly rebalancing engine.

Timeline (0-based month indices, ``W = window_months``): the first decision
is made at the end of month ``t0 = W - 1`` using months ``0..t0``; the
portfolio chosen at ``t`` earns ``w_t' r_{t+1}``. The model is refit every
``refit_every_months`` decisions on the trailing ``W`` months and held fixed
in between, while forecasts are refreshed monthly from the newest
characteristics and macro predictors.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError, ParameterError, SamplerError
from .panel import PanelDataset, build_sur, forecast_features
from .performance import anomaly_pricing, factor_regression, sharpe_annualized
from .portfolio import PortfolioConstraints, ew_weights, weights_constrained
from .predictive import (
    IntervalForecast,
    PredictiveMoments,
    coverage,
    interval_length,
    predict_moments,
    predictive_interval,
    r2_oos,
)
from .sampler import default_hyperparams, diagnostics, run_chain

logger = logging.getLogger(__name__)

STRATEGIES = ("bh", "moving_average", "equal_weight")
STRATEGY_ALIASES = {"ma": "moving_average", "ew": "equal_weight"}

DEFAULT_FACTOR_MODELS = {
    "CAPM": ["mkt"],
    "FF3": ["mkt", "smb", "hml"],
    "FF5": ["mkt", "smb", "hml", "rmw", "cma"],
}


@dataclass
class SamplerConfig:
    n_total: int = 3000
    n_burn: int = 1000
    prior: str = "mild"
    seed: int = 0
    method: str = "auto"
    joint_threshold: int = 4000
    nu_sigma: float | None = None
    v_sigma: float | None = None


@dataclass
class BacktestConfig:
    window_months: int = 252
    refit_every_months: int = 12
    rebalance_every_months: int = 1
    strategy: str = "bh"
    gamma: float = 5.0
    gamma_grid: tuple[float, ...] = (2.0, 5.0, 10.0)
    constraints: PortfolioConstraints = field(default_factory=PortfolioConstraints)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    use_total_cov: bool = True
    ma_window: int | None = None
    interval_level: float = 0.95
    subperiod_splits: tuple[str, ...] = ()
    factor_models: dict[str, list[str]] | None = None
    hac_lags: int | None = None
    jobs: int = 1

    def __post_init__(self):
        self.strategy = STRATEGY_ALIASES.get(self.strategy, self.strategy)
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"strategy must be one of {STRATEGIES + tuple(STRATEGY_ALIASES)}, got {self.strategy!r}")
        if self.window_months < 24:
            raise ParameterError(f"window_months must be >= 24, got {self.window_months}")
        if self.rebalance_every_months < 1 or self.refit_every_months % self.rebalance_every_months:
            raise ParameterError("refit_every_months must be a positive multiple of rebalance_every_months")
        if not self.gamma > 0 or any(not g > 0 for g in self.gamma_grid):
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")
        self.gamma_grid = tuple(float(g) for g in self.gamma_grid)
        self.subperiod_splits = tuple(self.subperiod_splits)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["constraints"] = self.constraints.to_dict()
        d["gamma_grid"] = list(self.gamma_grid)
        d["subperiod_splits"] = list(self.subperiod_splits)
        d.pop("jobs")  # execution detail; results do not depend on it
        return d


@dataclass
class BacktestReport:
    decision_dates: list[str]
    realized_dates: list[str]
    asset_ids: list[str]
    weights: np.ndarray  # (T_oos, N), chosen at decision_dates
    portfolio_returns: np.ndarray  # (T_oos,), realized at realized_dates
    realized: np.ndarray  # (T_oos, N)
    forecasts: np.ndarray | None
    benchmark: np.ndarray
    intervals: IntervalForecast | None
    intervals_param: IntervalForecast | None
    metrics: dict
    config: dict
    fits: list[dict] = field(default_factory=list)

    @property
    def cumulative_value(self) -> np.ndarray:
        """Value of $1 invested at the first decision date; length T_oos + 1."""
        return np.concatenate(([1.0], np.cumprod(1.0 + self.portfolio_returns)))

    def to_dict(self) -> dict:
        return _clean(
            {
                "format": "bhalloc.backtest_report/1",
                "config": self.config,
                "metrics": self.metrics,
                "fits": self.fits,
                "decision_dates": self.decision_dates,
                "realized_dates": self.realized_dates,
                "asset_ids": self.asset_ids,
                "portfolio_returns": self.portfolio_returns.tolist(),
                "cumulative_value": self.cumulative_value.tolist(),
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def write(self, directory) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "report": directory / "report.json",
            "weights": directory / "weights.csv",
            "cumulative": directory / "cumulative.csv",
        }
        paths["report"].write_text(self.to_json())
        with open(paths["weights"], "w") as fh:
            fh.write("date,asset,weight\n")
            for d, row in zip(self.decision_dates, self.weights):
                for a, w in zip(self.asset_ids, row):
                    fh.write(f"{d},{a},{float(w)!r}\n")
        with open(paths["cumulative"], "w") as fh:
            fh.write("date,value\n")
            for d, v in zip([self.decision_dates[0]] + self.realized_dates, self.cumulative_value):
                fh.write(f"{d},{float(v)!r}\n")
        if self.forecasts is not None:
            paths["forecasts"] = directory / "forecasts.csv"
            with open(paths["forecasts"], "w") as fh:
                fh.write("date,asset,forecast,lower,upper,lower_param,upper_param,benchmark,realized\n")
                for t, d in enumerate(self.decision_dates):
                    for i, a in enumerate(self.asset_ids):
                        vals = (
                            self.forecasts[t, i],
                            self.intervals.lower[t, i],
                            self.intervals.upper[t, i],
                            self.intervals_param.lower[t, i],
                            self.intervals_param.upper[t, i],
                            self.benchmark[t, i],
                            self.realized[t, i],
                        )
                        fh.write(f"{d},{a}," + ",".join(repr(float(v)) for v in vals) + "\n")
        return paths


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


# --------------------------------------------------------------------------
# Per-refit forecasting blocks


def _fit_block(ds: PanelDataset, cfg: BacktestConfig, refit_idx: int, t_fit: int, months: list[int]):
    """Fit on the window ending at ``t_fit`` and forecast each decision month."""
    w0 = t_fit - cfg.window_months + 1
    if cfg.strategy == "bh":
        sys = build_sur(ds, w0, t_fit)
        sc = cfg.sampler
        hp = default_hyperparams(sc.prior, sys.n_assets, sys.k, nu_sigma=sc.nu_sigma, v_sigma=sc.v_sigma)
        try:
            draws = run_chain(
                sys,
                hp,
                sc.n_total,
                sc.n_burn,
                sc.seed,
                stream_id=refit_idx,
                method=sc.method,
                joint_threshold=sc.joint_threshold,
                store_delta_b=False,
            )
        except SamplerError as exc:
            raise SamplerError(f"refit at {ds.dates[t_fit]}: {exc}", exc.iteration) from exc
        moments = [
            predict_moments(draws, forecast_features(ds, t, sys.macro_center, sys.macro_scale)) for t in months
        ]
        info = {"refit_date": ds.dates[t_fit], "window": [ds.dates[w0], ds.dates[t_fit]]}
        if len(draws) >= 100:
            summary = diagnostics(draws, seed=sc.seed).summary()
            info.update(min_ess_ratio=summary["min_ess_ratio"], mean_ess_ratio=summary["mean_ess_ratio"])
        return moments, info
    if cfg.strategy == "moving_average":
        window = ds.returns[w0 : t_fit + 1]
        cov = np.atleast_2d(np.cov(window, rowvar=False))
        zero = np.zeros_like(cov)
        moments = [
            PredictiveMoments(mean=_ma(ds.returns, w0, t, cfg.ma_window), cov_param=zero, cov_resid=cov)
            for t in months
        ]
        return moments, {"refit_date": ds.dates[t_fit], "window": [ds.dates[w0], ds.dates[t_fit]]}
    return None, {"refit_date": ds.dates[t_fit]}


def _ma(returns: np.ndarray, w0: int, t: int, window: int | None) -> np.ndarray:
    lo = w0 if window is None else max(w0, t - window + 1)
    return returns[lo : t + 1].mean(axis=0)


def _fit_block_star(args):
    return _fit_block(*args)


def _subperiods(dates: list[str], splits: tuple[str, ...]) -> dict[str, np.ndarray]:
    dates_arr = np.asarray(dates)
    out = {"overall": np.ones(len(dates), dtype=bool)}
    edges = [None, *sorted(splits), None]
    if splits:
        for lo, hi in zip(edges[:-1], edges[1:]):
            mask = np.ones(len(dates), dtype=bool)
            if lo is not None:
                mask &= dates_arr >= lo
            if hi is not None:
                mask &= dates_arr < hi
            if mask.any():
                out[f"{dates_arr[mask][0]}..{dates_arr[mask][-1]}"] = mask
    return out


def _aligned(frame: pd.DataFrame, dates: list[str], what: str) -> pd.DataFrame:
    frame = frame.copy()
    frame.index = frame.index.astype(str)
    missing = [d for d in dates if d not in frame.index]
    if missing:
        raise DataError(f"{what} lack {len(missing)} backtest month(s), first {missing[0]}")
    return frame.loc[dates]


def run_backtest(
    ds: PanelDataset,
    cfg: BacktestConfig | None = None,
    *,
    factors: pd.DataFrame | None = None,
    anomalies: pd.DataFrame | None = None,
) -> BacktestReport:
    """Run the rolling strategy and compute the full metric suite.

    ``factors`` (index: ``YYYY-MM``) supplies factor returns for the alpha
    regressions (an ``rf`` column, if present, is subtracted from portfolio
    returns first); ``anomalies`` supplies long-short returns priced by the
    strategy portfolio.
    """
    cfg = cfg or BacktestConfig()
    w = cfg.window_months
    t_total, n = ds.returns.shape
    if t_total < w + 12:
        raise DataError(f"backtest needs at least window_months + 12 = {w + 12} months, dataset has {t_total}")
    t0 = w - 1
    decisions = list(range(t0, t_total - 1))
    refits = decisions[:: cfg.refit_every_months]
    blocks = [decisions[j : j + cfg.refit_every_months] for j in range(0, len(decisions), cfg.refit_every_months)]
    tasks = [(ds, cfg, j, t_fit, months) for j, (t_fit, months) in enumerate(zip(refits, blocks))]

    if cfg.jobs > 1 and cfg.strategy == "bh" and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_fit_block_star, tasks))
    else:
        results = [_fit_block(*task) for task in tasks]
    moments: list[PredictiveMoments] | None = None
    if cfg.strategy != "equal_weight":
        moments = [m for block, _ in results for m in block]
    fits = [info for _, info in results]

    t_oos = len(decisions)
    realized = ds.returns[np.asarray(decisions) + 1]
    benchmark = np.vstack([_ma(ds.returns, t_fit - w + 1, t, cfg.ma_window) for t_fit, months in zip(refits, blocks) for t in months])

    gammas = list(dict.fromkeys([cfg.gamma, *cfg.gamma_grid]))
    weights = {g: np.empty((t_oos, n)) for g in gammas}
    prev: dict[float, np.ndarray | None] = {g: None for g in gammas}
    for j in range(t_oos):
        rebalance = j % cfg.rebalance_every_months == 0
        for g in gammas:
            if not rebalance:
                weights[g][j] = weights[g][j - 1]
                continue
            if moments is None:
                w_new = ew_weights(n).weights
            else:
                m = moments[j]
                cons = cfg.constraints.with_prev(prev[g])
                w_new = weights_constrained(m.mean, m.cov(cfg.use_total_cov), g, cons).weights
            weights[g][j] = w_new
            prev[g] = w_new
    port = {g: np.einsum("ti,ti->t", weights[g], realized) for g in gammas}

    realized_dates = [ds.dates[t + 1] for t in decisions]
    decision_dates = [ds.dates[t] for t in decisions]
    forecasts = intervals = intervals_p = None
    if moments is not None:
        forecasts = np.vstack([m.mean for m in moments])
        tot = [predictive_interval(m, cfg.interval_level, use_total=True) for m in moments]
        par = [predictive_interval(m, cfg.interval_level, use_total=False) for m in moments]
        intervals = IntervalForecast(np.vstack([i.lower for i in tot]), np.vstack([i.upper for i in tot]), cfg.interval_level)
        intervals_p = IntervalForecast(np.vstack([i.lower for i in par]), np.vstack([i.upper for i in par]), cfg.interval_level)

    main = port[cfg.gamma]
    metrics = _metrics(
        cfg, realized_dates, main, realized, forecasts, benchmark, intervals, intervals_p, factors, anomalies
    )
    metrics["gamma_sensitivity"] = {
        repr(g): {"avg_return": float(port[g].mean()), "sharpe_annualized": _safe_sharpe(port[g])} for g in gammas
    }
    meta = cfg.to_dict()
    if cfg.strategy == "bh":
        meta["sampler_draws"] = {"n_total": cfg.sampler.n_total, "n_burn": cfg.sampler.n_burn}
    return BacktestReport(
        decision_dates=decision_dates,
        realized_dates=realized_dates,
        asset_ids=list(ds.asset_ids),
        weights=weights[cfg.gamma],
        portfolio_returns=main,
        realized=realized,
        forecasts=forecasts,
        benchmark=benchmark,
        intervals=intervals,
        intervals_param=intervals_p,
        metrics=metrics,
        config=meta,
        fits=fits,
    )


def _safe_sharpe(r: np.ndarray, rf=None) -> float | None:
    try:
        return sharpe_annualized(r, rf)
    except (ParameterError, ArithmeticError):
        return None


def _prediction_metrics(mask, realized, forecasts, benchmark, intervals, intervals_p) -> dict:
    sub = lambda a: a[mask]  # noqa: E731
    out = {}
    try:
        out["r2_oos"] = r2_oos(sub(forecasts), sub(realized), sub(benchmark))
    except ArithmeticError:
        out["r2_oos"] = None
    for tag, iv in (("", intervals), ("_param", intervals_p)):
        sliced = IntervalForecast(sub(iv.lower), sub(iv.upper), iv.level)
        out[f"c_oos{tag}"] = coverage(sliced, sub(realized))
        out[f"il_oos{tag}"] = interval_length(sliced)
    return out


def _metrics(cfg, dates, port, realized, forecasts, benchmark, intervals, intervals_p, factors, anomalies) -> dict:
    periods = _subperiods(dates, cfg.subperiod_splits)
    rf = None
    fac = None
    if factors is not None:
        fac = _aligned(factors, dates, "factor returns")
        if "rf" in fac.columns:
            rf = fac["rf"].to_numpy(dtype=float)
    excess = port - rf if rf is not None else port
    models = cfg.factor_models if cfg.factor_models is not None else DEFAULT_FACTOR_MODELS

    performance = {}
    for label, mask in periods.items():
        block = {
            "n_months": int(mask.sum()),
            "avg_return": float(port[mask].mean()),
            "sharpe_annualized": _safe_sharpe(port[mask], None if rf is None else rf[mask]),
            "factor_models": {},
        }
        if fac is not None:
            for name, cols in models.items():
                if all(c in fac.columns for c in cols) and mask.sum() >= len(cols) + 2:
                    res = factor_regression(excess[mask], fac.loc[np.asarray(dates)[mask], cols], cfg.hac_lags)
                    block["factor_models"][name] = res.to_dict()
            capm = block["factor_models"].get("CAPM")
            if capm is not None:
                block["jensen_alpha"] = capm["alpha"]
                block["jensen_alpha_t"] = capm["t_stats"]["alpha"]
                block["capm_r2"] = capm["r2"]
        performance[label] = block

    out = {"performance": performance, "cumulative_final": float(np.prod(1.0 + port))}
    if forecasts is not None:
        out["prediction"] = {
            label: _prediction_metrics(mask, realized, forecasts, benchmark, intervals, intervals_p)
            for label, mask in periods.items()
        }
    if anomalies is not None:
        anom = _aligned(anomalies, dates, "anomaly returns")
        pricing = {"strategy": anomaly_pricing(anom, pd.Series(excess, index=anom.index, name="strategy"), cfg.hac_lags)}
        if fac is not None:
            for name, cols in models.items():
                if all(c in fac.columns for c in cols):
                    pricing[name] = anomaly_pricing(anom, fac[cols], cfg.hac_lags)
        out["anomaly_pricing"] = pricing
    return out
