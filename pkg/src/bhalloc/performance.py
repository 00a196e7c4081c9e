"""Portfolio performance statistics and factor-model regressions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ParameterError, UndefinedMetricError


def moving_average_forecast(history, window: int | None = None) -> float:
    """Mean of past returns; the last ``window`` observations when given."""
    h = np.asarray(history, dtype=float).ravel()
    if h.size == 0:
        raise ParameterError("moving-average forecast needs at least one observation")
    if window is not None:
        h = h[-window:]
    return float(h.mean())


def sharpe_annualized(returns, rf=None) -> float:
    """``sqrt(12) * mean / sd`` of monthly excess returns (sd with n - 1)."""
    r = np.asarray(returns, dtype=float).ravel()
    if rf is not None:
        r = r - np.broadcast_to(np.asarray(rf, dtype=float).ravel(), r.shape)
    if r.size < 2:
        raise ParameterError("Sharpe ratio needs at least 2 observations")
    sd = r.std(ddof=1)
    if np.all(r == r[0]) or not sd > 0:
        raise UndefinedMetricError("excess returns have zero variance; Sharpe ratio undefined")
    return float(r.mean() / sd * np.sqrt(12.0))


@dataclass
class RegressionResult:
    alpha: float
    betas: dict[str, float]
    t_stats: dict[str, float]
    std_errors: dict[str, float]
    r2: float
    n_obs: int
    cov_type: str = "classical"
    p_values: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "betas": self.betas,
            "t_stats": self.t_stats,
            "std_errors": self.std_errors,
            "p_values": self.p_values,
            "r2": self.r2,
            "n_obs": self.n_obs,
            "cov_type": self.cov_type,
        }


def _newey_west(x: np.ndarray, resid: np.ndarray, xtx_inv: np.ndarray, lags: int) -> np.ndarray:
    scores = x * resid[:, None]
    meat = scores.T @ scores
    for lag in range(1, lags + 1):
        w = 1.0 - lag / (lags + 1.0)
        gamma = scores[lag:].T @ scores[:-lag]
        meat += w * (gamma + gamma.T)
    return xtx_inv @ meat @ xtx_inv


def factor_regression(portfolio_returns, factor_returns, hac_lags: int | None = None) -> RegressionResult:
    """OLS of returns on an intercept plus factor columns.

    ``factor_returns`` may be a DataFrame, a dict of series, or an array
    (columns named ``f0, f1, ...``). Classical standard errors by default;
    ``hac_lags`` switches to Newey-West with Bartlett weights.
    """
    y = np.asarray(portfolio_returns, dtype=float).ravel()
    if isinstance(factor_returns, pd.Series):
        factor_returns = factor_returns.to_frame()
    if isinstance(factor_returns, dict):
        factor_returns = pd.DataFrame(factor_returns)
    if isinstance(factor_returns, pd.DataFrame):
        names = [str(c) for c in factor_returns.columns]
        f = factor_returns.to_numpy(dtype=float)
    else:
        f = np.asarray(factor_returns, dtype=float)
        f = f[:, None] if f.ndim == 1 else f
        names = [f"f{j}" for j in range(f.shape[1])]
    if f.shape[0] != y.size:
        raise ParameterError(f"{y.size} returns but {f.shape[0]} factor rows")
    n, m = f.shape
    if n < m + 2:
        raise ParameterError(f"need at least {m + 2} observations for {m} factors, got {n}")
    x = np.column_stack([np.ones(n), f])
    if np.linalg.matrix_rank(x) < m + 1:
        raise UndefinedMetricError("factor design matrix is rank deficient")
    xtx_inv = np.linalg.inv(x.T @ x)
    coef = xtx_inv @ (x.T @ y)
    resid = y - x @ coef
    dof = n - m - 1
    if hac_lags:
        cov = _newey_west(x, resid, xtx_inv, int(hac_lags))
        cov_type = f"newey-west({int(hac_lags)})"
    else:
        cov = xtx_inv * (resid @ resid) / dof
        cov_type = "classical"
    se = np.sqrt(np.diag(cov))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / se, np.where(coef == 0, 0.0, np.inf * np.sign(coef)))
    pv = 2.0 * stats.t.sf(np.abs(t), dof)
    tss = np.sum((y - y.mean()) ** 2)
    r2 = float(1.0 - (resid @ resid) / tss) if tss > 0 else 1.0
    keys = ["alpha"] + names
    return RegressionResult(
        alpha=float(coef[0]),
        betas={k: float(v) for k, v in zip(names, coef[1:])},
        t_stats={k: float(v) for k, v in zip(keys, t)},
        std_errors={k: float(v) for k, v in zip(keys, se)},
        r2=r2,
        n_obs=n,
        cov_type=cov_type,
        p_values={k: float(v) for k, v in zip(keys, pv)},
    )


def anomaly_pricing(anomalies: pd.DataFrame, pricing_factors: pd.DataFrame | pd.Series, hac_lags=None) -> dict:
    """Regress every anomaly column on the pricing factor(s); alpha and t per anomaly."""
    out = {}
    for name in anomalies.columns:
        res = factor_regression(anomalies[name].to_numpy(), pricing_factors, hac_lags=hac_lags)
        out[str(name)] = {"alpha": res.alpha, "t_alpha": res.t_stats["alpha"], "r2": res.r2}
    return out
