"""Hierarchical SUR model and its four-block Gibbs sampler.

Model, for assets ``i = 1..N`` with regressor blocks ``f_i`` (T x K)::

    r_i = f_i b_i + e_i,          rows of [e_1 .. e_N] ~ N(0, Sigma) iid over t
    b_i ~ N(bbar, Delta_b)
    bbar ~ N(bbar_bar, Delta_bbar),   Delta_b ~ IW(nu_b, V_b)
    Sigma ~ IW(nu_sigma, V_sigma)

The residual covariance of the stacked system is ``Sigma_ij * 1{t = s}``;
every update below uses that structure directly.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, ParameterError, SamplerError
from .kernels import (
    cholesky,
    ess,
    inverse_wishart_mean,
    make_rng,
    sample_inverse_wishart,
    sample_mvn_precision,
    spd_inverse,
    symmetrize,
)
from .panel import SurSystem

logger = logging.getLogger(__name__)

STEP_ORDER = ("b", "bbar", "delta_b", "sigma")
DEFAULT_JOINT_THRESHOLD = 4000


@dataclass(frozen=True)
class HyperParams:
    bbar_bar: np.ndarray
    delta_bbar: np.ndarray
    nu_b: float
    v_b: np.ndarray
    nu_sigma: float
    v_sigma: np.ndarray

    def __post_init__(self):
        for name in ("bbar_bar", "delta_bbar", "v_b", "v_sigma"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        k, n = self.bbar_bar.size, self.v_sigma.shape[0]
        if self.delta_bbar.shape != (k, k) or self.v_b.shape != (k, k):
            raise ParameterError("delta_bbar and v_b must be K x K")
        if self.v_sigma.shape != (n, n):
            raise ParameterError("v_sigma must be square")
        if not self.nu_b > k - 1:
            raise ParameterError(f"nu_b must exceed K - 1 = {k - 1}, got {self.nu_b}")
        if not self.nu_sigma > n - 1:
            raise ParameterError(f"nu_sigma must exceed N - 1 = {n - 1}, got {self.nu_sigma}")
        for name in ("delta_bbar", "v_b", "v_sigma"):
            cholesky(getattr(self, name), name)

    @property
    def k(self) -> int:
        return self.bbar_bar.size

    @property
    def n_assets(self) -> int:
        return self.v_sigma.shape[0]

    def to_dict(self) -> dict:
        return {
            "bbar_bar": self.bbar_bar.tolist(),
            "delta_bbar": self.delta_bbar.tolist(),
            "nu_b": float(self.nu_b),
            "v_b": self.v_b.tolist(),
            "nu_sigma": float(self.nu_sigma),
            "v_sigma": self.v_sigma.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(
            bbar_bar=np.asarray(d["bbar_bar"]),
            delta_bbar=np.asarray(d["delta_bbar"]),
            nu_b=d["nu_b"],
            v_b=np.asarray(d["v_b"]),
            nu_sigma=d["nu_sigma"],
            v_sigma=np.asarray(d["v_sigma"]),
        )


def default_hyperparams(
    setting: str,
    n_assets: int,
    k: int,
    *,
    nu_sigma: float | None = None,
    v_sigma: np.ndarray | float | None = None,
) -> HyperParams:
    """Prior settings: ``mild`` (nu_b = 1001 + K) or ``tight`` (nu_b = 5001 + K).

    Both use bbar_bar = 0, Delta_bbar = 0.1 I, V_b = 3 I. The residual prior
    defaults to IW(N + 2, I_N); a scalar ``v_sigma`` means ``v_sigma * I``.
    """
    offsets = {"mild": 1001, "tight": 5001}
    if setting not in offsets:
        raise ParameterError(f"prior setting must be 'mild' or 'tight', got {setting!r}")
    if v_sigma is None:
        v_sigma = np.eye(n_assets)
    elif np.isscalar(v_sigma):
        v_sigma = float(v_sigma) * np.eye(n_assets)
    return HyperParams(
        bbar_bar=np.zeros(k),
        delta_bbar=0.1 * np.eye(k),
        nu_b=float(offsets[setting] + k),
        v_b=3.0 * np.eye(k),
        nu_sigma=float(n_assets + 2 if nu_sigma is None else nu_sigma),
        v_sigma=np.asarray(v_sigma, dtype=float),
    )


@dataclass
class ChainState:
    b: np.ndarray  # (N, K), row i is b_i
    bbar: np.ndarray  # (K,)
    delta_b: np.ndarray  # (K, K)
    sigma: np.ndarray  # (N, N)

    def copy(self) -> "ChainState":
        return ChainState(self.b.copy(), self.bbar.copy(), self.delta_b.copy(), self.sigma.copy())


class SurMoments:
    """Cross-products of a :class:`SurSystem` reused by every sweep.

    ``gram[i, j] = f_i' f_j`` and ``xty[i, j] = f_i' r_j`` are built lazily;
    the blocked path only ever needs the diagonal Gram blocks.
    """

    def __init__(self, sys: SurSystem):
        self.sys = sys
        self._gram = None
        self._gram_diag = None
        self._xty = None

    @property
    def gram(self) -> np.ndarray:
        if self._gram is None:
            f = self.sys.features
            self._gram = np.einsum("itk,jtl->ijkl", f, f, optimize=True)
        return self._gram

    @property
    def gram_diag(self) -> np.ndarray:
        if self._gram_diag is None:
            f = self.sys.features
            self._gram_diag = np.einsum("itk,itl->ikl", f, f, optimize=True)
        return self._gram_diag

    @property
    def xty(self) -> np.ndarray:
        if self._xty is None:
            self._xty = np.einsum("itk,jt->ijk", self.sys.features, self.sys.targets, optimize=True)
        return self._xty


def residuals(sys: SurSystem, b: np.ndarray) -> np.ndarray:
    """Residual matrix of shape (T, N): column i is ``r_i - f_i b_i``."""
    return (sys.targets - np.einsum("itk,ik->it", sys.features, b)).T


def _resolve_method(method: str, n_assets: int, k: int, joint_threshold: int) -> str:
    if method == "auto":
        return "joint" if n_assets * k <= joint_threshold else "blocked"
    if method not in ("joint", "blocked"):
        raise ParameterError(f"method must be 'auto', 'joint' or 'blocked', got {method!r}")
    return method


def step_b(
    state: ChainState,
    sys: SurSystem,
    hp: HyperParams,
    rng: np.random.Generator,
    *,
    moments: SurMoments | None = None,
    method: str = "auto",
    joint_threshold: int = DEFAULT_JOINT_THRESHOLD,
) -> np.ndarray:
    """Draw all coefficient vectors given bbar, Delta_b and Sigma.

    The joint path assembles the NK x NK precision
    ``[sigma^ij f_i'f_j] + I_N (x) Delta_b^-1`` blockwise and takes one
    Cholesky. The blocked path sweeps ``b_i | b_-i`` for each asset, which has
    the same invariant distribution at O(N K^3) per sweep.
    """
    moments = moments or SurMoments(sys)
    n, k = state.b.shape
    sigma_inv = spd_inverse(state.sigma, "Sigma")
    delta_inv = spd_inverse(state.delta_b, "Delta_b")
    prior_lin = delta_inv @ state.bbar
    if _resolve_method(method, n, k, joint_threshold) == "joint":
        prec = (sigma_inv[:, :, None, None] * moments.gram).transpose(0, 2, 1, 3).reshape(n * k, n * k)
        for i in range(n):
            blk = slice(i * k, (i + 1) * k)
            prec[blk, blk] += delta_inv
        lin = np.einsum("ij,ijk->ik", sigma_inv, moments.xty) + prior_lin
        draw, _ = sample_mvn_precision(lin.reshape(-1), symmetrize(prec), rng)
        return draw.reshape(n, k)

    b = state.b.copy()
    gram = moments.gram_diag
    resid = residuals(sys, b)  # (T, N)
    f = sys.features
    for i in range(n):
        s_ii = sigma_inv[i, i]
        prec = s_ii * gram[i] + delta_inv
        lin = f[i].T @ (resid @ sigma_inv[:, i]) + s_ii * (gram[i] @ b[i]) + prior_lin
        b[i], _ = sample_mvn_precision(lin, symmetrize(prec), rng)
        resid[:, i] = sys.targets[i] - f[i] @ b[i]
    return b


def step_bbar(state: ChainState, hp: HyperParams, rng: np.random.Generator) -> np.ndarray:
    """Draw the common mean given the coefficient vectors and Delta_b."""
    n = state.b.shape[0]
    delta_inv = spd_inverse(state.delta_b, "Delta_b")
    prior_prec = spd_inverse(hp.delta_bbar, "Delta_bbar")
    prec = prior_prec + n * delta_inv
    lin = prior_prec @ hp.bbar_bar + delta_inv @ state.b.sum(axis=0)
    draw, _ = sample_mvn_precision(lin, symmetrize(prec), rng)
    return draw


def step_delta_b(state: ChainState, hp: HyperParams, rng: np.random.Generator) -> np.ndarray:
    """Draw Delta_b from IW(nu_b + N, V_b + sum_i (b_i - bbar)(b_i - bbar)')."""
    dev = state.b - state.bbar[None, :]
    return sample_inverse_wishart(hp.nu_b + state.b.shape[0], hp.v_b + dev.T @ dev, rng)


def step_sigma(
    state: ChainState, sys: SurSystem, hp: HyperParams, rng: np.random.Generator
) -> np.ndarray:
    """Draw Sigma from IW(nu_sigma + T, V_sigma + E'E) with E the T x N residuals."""
    resid = residuals(sys, state.b)
    return sample_inverse_wishart(hp.nu_sigma + sys.n_obs, hp.v_sigma + resid.T @ resid, rng)


def initial_state(sys: SurSystem, hp: HyperParams) -> ChainState:
    """Ridge start: b_i = (f_i'f_i + I)^-1 f_i'r_i, bbar = mean b_i, Delta_b at its
    prior mean and Sigma at the ridge-residual covariance plus 1e-6 I."""
    n, t, k = sys.n_assets, sys.n_obs, sys.k
    b = np.zeros((n, k))
    for i in range(n):
        f = sys.features[i]
        b[i] = np.linalg.solve(f.T @ f + np.eye(k), f.T @ sys.targets[i])
    if hp.nu_b > k + 1:
        delta_b = inverse_wishart_mean(hp.nu_b, hp.v_b)
    else:
        delta_b = hp.v_b.copy()
    if t >= 2:
        resid = residuals(sys, b)
        sigma = np.atleast_2d(np.cov(resid, rowvar=False)) + 1e-6 * np.eye(n)
    elif hp.nu_sigma > n + 1:
        sigma = inverse_wishart_mean(hp.nu_sigma, hp.v_sigma)
    else:
        sigma = hp.v_sigma.copy()
    return ChainState(b=b, bbar=b.mean(axis=0), delta_b=delta_b, sigma=symmetrize(sigma))


def gibbs_sweep(
    state: ChainState,
    sys: SurSystem,
    hp: HyperParams,
    rng: np.random.Generator,
    *,
    moments: SurMoments | None = None,
    order: Sequence[str] = STEP_ORDER,
    method: str = "auto",
    joint_threshold: int = DEFAULT_JOINT_THRESHOLD,
) -> ChainState:
    """One full cycle of the four conditional updates, in ``order``. Updates in place."""
    moments = moments or SurMoments(sys)
    for step in order:
        if step == "b":
            state.b = step_b(state, sys, hp, rng, moments=moments, method=method, joint_threshold=joint_threshold)
        elif step == "bbar":
            state.bbar = step_bbar(state, hp, rng)
        elif step == "delta_b":
            state.delta_b = step_delta_b(state, hp, rng)
        elif step == "sigma":
            state.sigma = step_sigma(state, sys, hp, rng)
        else:
            raise ParameterError(f"unknown Gibbs step {step!r}")
    return state


@dataclass
class PosteriorDraws:
    """Retained post-burn-in draws.

    Full ``delta_b`` draws are kept only when requested (they cost n K^2
    floats); their diagonal and running mean are always kept.
    """

    b: np.ndarray  # (n, N, K)
    bbar: np.ndarray  # (n, K)
    delta_b_diag: np.ndarray  # (n, K)
    delta_b_mean: np.ndarray  # (K, K)
    sigma: np.ndarray  # (n, N, N)
    meta: dict = field(default_factory=dict)
    delta_b: np.ndarray | None = None  # (n, K, K)

    def __len__(self) -> int:
        return self.b.shape[0]

    @property
    def n_assets(self) -> int:
        return self.b.shape[1]

    @property
    def k(self) -> int:
        return self.b.shape[2]

    def state(self, j: int) -> ChainState:
        delta = self.delta_b[j] if self.delta_b is not None else np.diag(self.delta_b_diag[j])
        return ChainState(self.b[j], self.bbar[j], delta, self.sigma[j])

    @property
    def sigma_mean(self) -> np.ndarray:
        return self.sigma.mean(axis=0)


def run_chain(
    sys: SurSystem,
    hp: HyperParams,
    n_total: int = 3000,
    n_burn: int = 1000,
    seed: int = 0,
    *,
    stream_id: int = 0,
    method: str = "auto",
    joint_threshold: int = DEFAULT_JOINT_THRESHOLD,
    order: Sequence[str] = STEP_ORDER,
    init: ChainState | None = None,
    store_delta_b: bool | None = None,
    callback: Callable[[int, ChainState], None] | None = None,
) -> PosteriorDraws:
    """Run the Gibbs sampler and keep the last ``n_total - n_burn`` states."""
    if not 0 <= n_burn < n_total:
        raise ParameterError(f"need 0 <= n_burn < n_total, got n_burn={n_burn}, n_total={n_total}")
    if hp.k != sys.k or hp.n_assets != sys.n_assets:
        raise ParameterError(f"hyperparameters sized (N={hp.n_assets}, K={hp.k}) but system is {sys.dims}")
    n, k = sys.n_assets, sys.k
    resolved = _resolve_method(method, n, k, joint_threshold)
    if store_delta_b is None:
        store_delta_b = k <= 50
    rng = make_rng(seed, stream_id)
    moments = SurMoments(sys)
    state = init.copy() if init is not None else initial_state(sys, hp)

    n_keep = n_total - n_burn
    b_draws = np.empty((n_keep, n, k))
    bbar_draws = np.empty((n_keep, k))
    dd_draws = np.empty((n_keep, k))
    sigma_draws = np.empty((n_keep, n, n))
    delta_draws = np.empty((n_keep, k, k)) if store_delta_b else None
    delta_sum = np.zeros((k, k))

    logger.info("gibbs: N=%d K=%d T=%d, %d iterations (%s B-step)", n, k, sys.n_obs, n_total, resolved)
    for it in range(n_total):
        try:
            gibbs_sweep(state, sys, hp, rng, moments=moments, order=order, method=resolved)
        except NumericalError as exc:
            raise SamplerError(f"Gibbs iteration {it}: {exc}", iteration=it) from exc
        if callback is not None:
            callback(it, state)
        j = it - n_burn
        if j >= 0:
            b_draws[j] = state.b
            bbar_draws[j] = state.bbar
            dd_draws[j] = np.diag(state.delta_b)
            sigma_draws[j] = state.sigma
            delta_sum += state.delta_b
            if delta_draws is not None:
                delta_draws[j] = state.delta_b
    meta = {
        "n_total": int(n_total),
        "n_burn": int(n_burn),
        "seed": int(seed),
        "stream_id": int(stream_id),
        "method": resolved,
        "dims": sys.dims,
        "window": [sys.dates[0], sys.dates[-1]] if sys.dates else None,
    }
    return PosteriorDraws(
        b=b_draws,
        bbar=bbar_draws,
        delta_b_diag=dd_draws,
        delta_b_mean=delta_sum / n_keep,
        sigma=sigma_draws,
        meta=meta,
        delta_b=delta_draws,
    )


# --------------------------------------------------------------------------
# Diagnostics


@dataclass
class Diagnostics:
    ess: dict[str, float]
    n_draws: int
    traces: dict[str, np.ndarray]

    @property
    def ess_ratio(self) -> dict[str, float]:
        return {name: value / self.n_draws for name, value in self.ess.items()}

    def summary(self) -> dict:
        ratios = np.array(list(self.ess_ratio.values()))
        return {
            "n_draws": self.n_draws,
            "n_monitored": len(self.ess),
            "min_ess_ratio": float(ratios.min()),
            "mean_ess_ratio": float(ratios.mean()),
            "parameters": {
                name: {"ess": float(self.ess[name]), "ess_ratio": float(self.ess[name] / self.n_draws)}
                for name in self.ess
            },
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    def write_trace_csv(self, path, start_iteration: int = 0) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "parameter", "value"])
            for name, series in self.traces.items():
                for j, v in enumerate(series):
                    writer.writerow([start_iteration + j, name, repr(float(v))])


def monitored_traces(draws: PosteriorDraws, n_b: int = 50, seed: int = 0) -> dict[str, np.ndarray]:
    """All of bbar, diag(Delta_b), the upper triangle of Sigma and a seeded
    subset of ``n_b`` coefficient elements (everything when N K <= n_b)."""
    n, k = draws.n_assets, draws.k
    traces: dict[str, np.ndarray] = {}
    for a in range(k):
        traces[f"bbar[{a}]"] = draws.bbar[:, a]
    for a in range(k):
        traces[f"delta_b[{a},{a}]"] = draws.delta_b_diag[:, a]
    for i in range(n):
        for j in range(i, n):
            traces[f"sigma[{i},{j}]"] = draws.sigma[:, i, j]
    flat = np.arange(n * k)
    if n * k > n_b:
        flat = np.sort(make_rng(seed, 7919).choice(n * k, size=n_b, replace=False))
    for idx in flat:
        i, a = divmod(int(idx), k)
        traces[f"b[{i},{a}]"] = draws.b[:, i, a]
    return traces


def diagnostics(draws: PosteriorDraws, n_b: int = 50, seed: int = 0) -> Diagnostics:
    if len(draws) < 100:
        raise ParameterError(f"diagnostics need at least 100 retained draws, got {len(draws)}")
    traces = monitored_traces(draws, n_b=n_b, seed=seed)
    return Diagnostics(ess={k: ess(v) for k, v in traces.items()}, n_draws=len(draws), traces=traces)


def diagnostics_from_trace(path) -> Diagnostics:
    """Recompute ESS from a ``iteration,parameter,value`` trace CSV."""
    import pandas as pd

    frame = pd.read_csv(path, float_precision="round_trip")
    traces = {
        name: grp.sort_values("iteration")["value"].to_numpy()
        for name, grp in frame.groupby("parameter", sort=False)
    }
    lengths = {v.size for v in traces.values()}
    if len(lengths) != 1:
        raise ParameterError(f"trace series in {path} have unequal lengths {sorted(lengths)}")
    return Diagnostics(ess={k: ess(v) for k, v in traces.items()}, n_draws=lengths.pop(), traces=traces)


# --------------------------------------------------------------------------
# Fitted-model summary file

JOINT_COV_LIMIT = 1000


@dataclass
class FittedModel:
    """Posterior summary sufficient for forecasting without the raw draws.

    ``b_cov_joint`` (NK x NK) is stored only when N K <= ``JOINT_COV_LIMIT``;
    otherwise cross-asset coefficient covariances are dropped and
    ``b_cov_blocks`` holds the per-asset K x K blocks.
    """

    asset_ids: list[str]
    dims: dict
    hyperparams: HyperParams
    b_mean: np.ndarray
    b_cov_blocks: np.ndarray
    sigma_mean: np.ndarray
    macro_center: np.ndarray
    macro_scale: np.ndarray
    meta: dict = field(default_factory=dict)
    b_cov_joint: np.ndarray | None = None

    @classmethod
    def from_draws(cls, draws: PosteriorDraws, sys: SurSystem, hp: HyperParams, meta: dict | None = None):
        n, k = draws.n_assets, draws.k
        mean = draws.b.mean(axis=0)
        centered = (draws.b - mean).reshape(len(draws), n * k)
        blocks = np.einsum("sik,sil->ikl", centered.reshape(-1, n, k), centered.reshape(-1, n, k)) / len(draws)
        joint = centered.T @ centered / len(draws) if n * k <= JOINT_COV_LIMIT else None
        return cls(
            asset_ids=list(sys.asset_ids),
            dims=sys.dims,
            hyperparams=hp,
            b_mean=mean,
            b_cov_blocks=blocks,
            sigma_mean=draws.sigma_mean,
            macro_center=np.asarray(sys.macro_center),
            macro_scale=np.asarray(sys.macro_scale),
            meta={**draws.meta, **(meta or {})},
            b_cov_joint=joint,
        )

    def to_dict(self) -> dict:
        return {
            "format": "bhalloc.fitted_model/1",
            "asset_ids": self.asset_ids,
            "dims": self.dims,
            "hyperparams": self.hyperparams.to_dict(),
            "b_mean": self.b_mean.tolist(),
            "b_cov_blocks": self.b_cov_blocks.tolist(),
            "b_cov_joint": None if self.b_cov_joint is None else self.b_cov_joint.tolist(),
            "sigma_mean": self.sigma_mean.tolist(),
            "standardization": {"macro_center": self.macro_center.tolist(), "macro_scale": self.macro_scale.tolist()},
            "meta": self.meta,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def read_json(cls, path) -> "FittedModel":
        d = json.loads(Path(path).read_text())
        if d.get("format") != "bhalloc.fitted_model/1":
            raise ParameterError(f"{path} is not a fitted-model file")
        joint = d.get("b_cov_joint")
        return cls(
            asset_ids=d["asset_ids"],
            dims=d["dims"],
            hyperparams=HyperParams.from_dict(d["hyperparams"]),
            b_mean=np.asarray(d["b_mean"], dtype=float),
            b_cov_blocks=np.asarray(d["b_cov_blocks"], dtype=float),
            sigma_mean=np.asarray(d["sigma_mean"], dtype=float),
            macro_center=np.asarray(d["standardization"]["macro_center"], dtype=float),
            macro_scale=np.asarray(d["standardization"]["macro_scale"], dtype=float),
            meta=d.get("meta", {}),
            b_cov_joint=None if joint is None else np.asarray(joint, dtype=float),
        )
