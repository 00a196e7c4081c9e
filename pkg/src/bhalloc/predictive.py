"""Posterior predictive moments, interval forecasts and forecast metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import ParameterError, UndefinedMetricError
from .sampler import FittedModel, PosteriorDraws


@dataclass(frozen=True)
class PredictiveMoments:
    """Next-month moments of the N asset returns.

    ``cov_param`` is the coefficient-uncertainty term ``Cov(f_i'b_i, f_j'b_j)``
    and ``cov_resid`` the posterior mean of Sigma; ``cov_total`` is their sum.
    """

    mean: np.ndarray
    cov_param: np.ndarray
    cov_resid: np.ndarray

    @property
    def cov_total(self) -> np.ndarray:
        return self.cov_param + self.cov_resid

    def cov(self, use_total: bool = True) -> np.ndarray:
        return self.cov_total if use_total else self.cov_param


@dataclass(frozen=True)
class IntervalForecast:
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.95

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def _check_features(features: np.ndarray, n: int, k: int) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.shape != (n, k):
        raise ParameterError(f"features must have shape ({n}, {k}) to match the fitted model, got {features.shape}")
    return features


def predict_moments(model: PosteriorDraws | FittedModel, features: np.ndarray) -> PredictiveMoments:
    """Predictive mean and covariance for regressors ``features`` (N x K).

    With raw draws the coefficient term is the sample covariance (1/n
    normalization) of the per-draw forecasts ``f_i' b_i^(s)``. A
    :class:`FittedModel` gives the same value from its stored covariance, or a
    block-diagonal approximation when only per-asset blocks were stored.
    """
    if isinstance(model, PosteriorDraws):
        features = _check_features(features, model.n_assets, model.k)
        fc = np.einsum("sik,ik->si", model.b, features)
        # shifted-data moments: exact zeros when every draw is identical
        shifted = fc - fc[0]
        offset = shifted.mean(axis=0)
        mean = fc[0] + offset
        cov_param = shifted.T @ shifted / fc.shape[0] - np.outer(offset, offset)
        cov_resid = model.sigma_mean
    else:
        n, k = model.b_mean.shape
        features = _check_features(features, n, k)
        mean = np.einsum("ik,ik->i", model.b_mean, features)
        if model.b_cov_joint is not None:
            blocks = model.b_cov_joint.reshape(n, k, n, k)
            cov_param = np.einsum("ik,ikjl,jl->ij", features, blocks, features)
        else:
            cov_param = np.diag(np.einsum("ik,ikl,il->i", features, model.b_cov_blocks, features))
        cov_resid = model.sigma_mean
    cov_param = 0.5 * (cov_param + cov_param.T)
    return PredictiveMoments(mean=mean, cov_param=cov_param, cov_resid=np.array(cov_resid, dtype=float))


def z_value(level: float) -> float:
    """Two-sided normal quantile; exactly 1.96 at the 95% level."""
    if not 0.0 < level < 1.0:
        raise ParameterError(f"interval level must lie in (0, 1), got {level}")
    if level == 0.95:
        return 1.96
    return float(norm.ppf(0.5 + level / 2.0))


def predictive_interval(m: PredictiveMoments, level: float = 0.95, use_total: bool = True) -> IntervalForecast:
    sd = np.sqrt(np.maximum(np.diag(m.cov(use_total)), 0.0))
    half = z_value(level) * sd
    return IntervalForecast(lower=m.mean - half, upper=m.mean + half, level=level)


def r2_oos(pred, actual, benchmark) -> float:
    """Pooled out-of-sample R^2 relative to a benchmark forecast."""
    pred, actual, benchmark = (np.asarray(a, dtype=float) for a in (pred, actual, benchmark))
    if not pred.shape == actual.shape == benchmark.shape:
        raise ParameterError(f"shape mismatch: {pred.shape}, {actual.shape}, {benchmark.shape}")
    denom = np.sum((benchmark - actual) ** 2)
    if denom == 0.0:
        raise UndefinedMetricError("benchmark forecast errors are all zero; R^2_OOS undefined")
    return float(1.0 - np.sum((pred - actual) ** 2) / denom)


def coverage(intervals: IntervalForecast, actual) -> float:
    """Share of cells with ``lower < actual < upper`` (strict)."""
    actual = np.asarray(actual, dtype=float)
    if actual.shape != np.shape(intervals.lower):
        raise ParameterError(f"actual shape {actual.shape} != interval shape {np.shape(intervals.lower)}")
    inside = (intervals.lower < actual) & (actual < intervals.upper)
    return float(np.mean(inside))


def interval_length(intervals: IntervalForecast) -> float:
    width = np.asarray(intervals.width, dtype=float)
    if width.size == 0:
        raise ParameterError("interval_length needs at least one interval")
    return float(np.mean(width))
