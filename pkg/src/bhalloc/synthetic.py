"""Synthetic panels simulated from the hierarchical predictive model.

Used as the testing oracle: the generating coefficients and residual
covariance are returned alongside the panel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .kernels import cholesky, make_rng
from .panel import PanelDataset, build_feature_array, feature_dim, standardize_panel_chars


def month_labels(start: str, n: int) -> list[str]:
    year, month = (int(p) for p in start.split("-"))
    out = []
    for k in range(n):
        y, m = divmod(month - 1 + k, 12)
        out.append(f"{year + y:04d}-{m + 1:02d}")
    return out


@dataclass
class SyntheticTruth:
    b: np.ndarray  # (N, K)
    sigma: np.ndarray  # (N, N)
    n_chars: int
    n_macros: int
    macro_ar: float = 0.9

    @property
    def n_assets(self) -> int:
        return self.b.shape[0]

    def to_dict(self) -> dict:
        return {
            "b": self.b.tolist(),
            "sigma": self.sigma.tolist(),
            "n_chars": self.n_chars,
            "n_macros": self.n_macros,
            "macro_ar": self.macro_ar,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTruth":
        return cls(np.asarray(d["b"]), np.asarray(d["sigma"]), d["n_chars"], d["n_macros"], d.get("macro_ar", 0.9))

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def draw_truth(
    n_assets: int,
    n_chars: int,
    n_macros: int,
    seed: int = 0,
    *,
    common_sd: float = 0.01,
    asset_sd: float = 0.005,
    noise_sd: float = 0.05,
    corr: float = 0.3,
) -> SyntheticTruth:
    """Draw coefficients ``b_i = bbar + u_i`` with ``bbar ~ N(0, common_sd^2 I)``,
    ``u_i ~ N(0, asset_sd^2 I)``, and an equicorrelated residual covariance."""
    if n_assets < 1:
        raise ParameterError("need at least one asset")
    if not -1.0 / max(n_assets - 1, 1) < corr < 1.0:
        raise ParameterError(f"corr={corr} does not give a positive definite covariance")
    k = feature_dim(n_chars, n_macros)
    rng = make_rng(seed, 101)
    bbar = common_sd * rng.standard_normal(k)
    b = bbar[None, :] + asset_sd * rng.standard_normal((n_assets, k))
    r = np.full((n_assets, n_assets), corr)
    np.fill_diagonal(r, 1.0)
    return SyntheticTruth(b=b, sigma=noise_sd**2 * r, n_chars=n_chars, n_macros=n_macros)


def simulate_predictors(
    n_months: int, n_assets: int, n_chars: int, n_macros: int, rng: np.random.Generator, macro_ar: float = 0.9
) -> tuple[np.ndarray, np.ndarray]:
    """Characteristics (rank-standardized iid uniforms) and AR(1) macros, standardized."""
    z = standardize_panel_chars(rng.uniform(-1.0, 1.0, size=(n_months, n_assets, n_chars)))
    x = np.empty((n_months, n_macros))
    if n_macros:
        x[0] = rng.standard_normal(n_macros) / np.sqrt(1.0 - macro_ar**2)
        for t in range(1, n_months):
            x[t] = macro_ar * x[t - 1] + rng.standard_normal(n_macros)
        x = (x - x.mean(axis=0)) / np.where(x.std(axis=0) > 0, x.std(axis=0), 1.0)
    return z, x


def generate_synthetic_panel(
    truth: SyntheticTruth, n_months: int, seed: int = 0, *, start: str = "2000-01"
) -> tuple[PanelDataset, SyntheticTruth]:
    """Simulate ``n_months`` of panel data from the predictive model.

    One pre-sample month supplies the regressors for the first return, so row
    ``t`` of the returns equals ``f_{i,t-1}' b_i + eps_t`` for every row.
    """
    n, p, q = truth.n_assets, truth.n_chars, truth.n_macros
    if truth.b.shape != (n, feature_dim(p, q)):
        raise ParameterError(f"truth.b has shape {truth.b.shape}, expected ({n}, {feature_dim(p, q)})")
    if n_months < 2:
        raise ParameterError("need at least 2 months")
    rng = make_rng(seed, 202)
    chol = cholesky(truth.sigma, "truth sigma")
    z, x = simulate_predictors(n_months + 1, n, p, q, rng, truth.macro_ar)
    feats = build_feature_array(z, x[:, None, :])  # (T + 1, N, K)
    mean = np.einsum("tik,ik->ti", feats[:-1], truth.b)
    returns = mean + rng.standard_normal((n_months, n)) @ chol.T
    ds = PanelDataset(
        dates=month_labels(start, n_months),
        returns=returns,
        chars=z[1:],
        macros=x[1:],
        asset_ids=[f"asset{i + 1:02d}" for i in range(n)],
        char_ids=[f"char{j + 1:02d}" for j in range(p)],
        macro_ids=[f"macro{j + 1:02d}" for j in range(q)],
    )
    return ds, truth
