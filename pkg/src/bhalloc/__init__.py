"""Bayesian hierarchical SUR return forecasting and constrained allocation."""

from __future__ import annotations

from .backtest import BacktestConfig, BacktestReport, SamplerConfig, run_backtest
from .errors import (
    BHError,
    CholeskyError,
    DataError,
    InfeasibleError,
    NumericalError,
    ParameterError,
    SamplerError,
    UndefinedMetricError,
)
from .kernels import RngStream, ess, make_rng, sample_inverse_wishart, sample_mvn
from .panel import (
    PanelDataset,
    SurSystem,
    build_features,
    build_sur,
    forecast_features,
    load_panel,
    standardize_cross_section,
    write_panel,
)
from .performance import anomaly_pricing, factor_regression, moving_average_forecast, sharpe_annualized
from .portfolio import PortfolioConstraints, WeightVector, weights_constrained, weights_unconstrained
from .predictive import (
    IntervalForecast,
    PredictiveMoments,
    coverage,
    interval_length,
    predict_moments,
    predictive_interval,
    r2_oos,
)
from .sampler import (
    ChainState,
    Diagnostics,
    FittedModel,
    HyperParams,
    PosteriorDraws,
    default_hyperparams,
    diagnostics,
    run_chain,
)
from .synthetic import SyntheticTruth, draw_truth, generate_synthetic_panel

__version__ = "0.1.0"

_MODULES = {"annotations", "backtest", "errors", "kernels", "panel", "performance", "portfolio", "predictive", "sampler", "synthetic"}
__all__ = sorted(name for name in dir() if not name.startswith("_") and name not in _MODULES)
