"""Panel ingestion, cross-sectional standardization and SUR construction.

Row ``t`` of the characteristic and macro arrays predicts row ``t + 1`` of the
return matrix. Regressor vectors are laid out as ``[1, z, x, kron(x, z)]``
with the interaction block macro-major, so coefficient index ``1 + P + Q +
q * P + p`` multiplies ``x[q] * z[p]``.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .errors import DataError, ParameterError

logger = logging.getLogger(__name__)

MIN_COMMON_MONTHS = 24
_DATE_RE = re.compile(r"^\d{4}-(0[1-9]|1[0-2])$")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelDataset:
    """Aligned monthly panel of ``N`` assets.

    Attributes
    ----------
    dates : tuple of str
        ``YYYY-MM`` month labels, strictly increasing.
    returns : ndarray, shape (T, N)
        Excess returns in decimal per month.
    chars : ndarray, shape (T, N, P)
        Cross-sectionally standardized characteristics in [-1, 1].
    macros : ndarray, shape (T, Q)
        Macro predictors (standardized per estimation window by
        :func:`build_sur`, not here).
    """

    dates: tuple[str, ...]
    returns: np.ndarray
    chars: np.ndarray
    macros: np.ndarray
    asset_ids: tuple[str, ...]
    char_ids: tuple[str, ...]
    macro_ids: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "asset_ids", tuple(self.asset_ids))
        object.__setattr__(self, "char_ids", tuple(self.char_ids))
        object.__setattr__(self, "macro_ids", tuple(self.macro_ids))
        returns = _frozen(self.returns)
        chars = _frozen(self.chars)
        macros = _frozen(self.macros)
        t, n = returns.shape
        if chars.ndim != 3 or chars.shape[:2] != (t, n) or chars.shape[2] != len(self.char_ids):
            raise DataError(f"chars shape {chars.shape} inconsistent with returns {returns.shape}")
        if macros.ndim != 2 or macros.shape != (t, len(self.macro_ids)):
            raise DataError(f"macros shape {macros.shape} inconsistent with {t} months")
        if len(self.dates) != t or n != len(self.asset_ids):
            raise DataError("dates/asset_ids do not match array shapes")
        if list(self.dates) != sorted(set(self.dates)):
            raise DataError("dates must be strictly increasing without duplicates")
        if chars.size and np.nanmax(np.abs(chars)) > 1.0 + 1e-12:
            raise DataError("standardized characteristics must lie in [-1, 1]")
        object.__setattr__(self, "returns", returns)
        object.__setattr__(self, "chars", chars)
        object.__setattr__(self, "macros", macros)

    @property
    def n_months(self) -> int:
        return len(self.dates)

    @property
    def n_assets(self) -> int:
        return len(self.asset_ids)

    @property
    def n_chars(self) -> int:
        return len(self.char_ids)

    @property
    def n_macros(self) -> int:
        return len(self.macro_ids)

    def index_of(self, date: str | int) -> int:
        if isinstance(date, (int, np.integer)):
            idx = int(date)
            if not 0 <= idx < self.n_months:
                raise ParameterError(f"month index {idx} outside dataset (0..{self.n_months - 1})")
            return idx
        try:
            return self.dates.index(str(date))
        except ValueError:
            raise ParameterError(f"date {date!r} not in dataset") from None


def standardize_cross_section(raw: np.ndarray) -> np.ndarray:
    """Rank-map one cross section onto [-1, 1].

    Rank ``r`` (1-based, ties averaged) among the ``M`` non-missing values
    maps to ``-1 + 2 (r - 1) / (M - 1)``. NaN entries, and a lone non-missing
    value, map to 0.
    """
    raw = np.asarray(raw, dtype=float)
    out = np.zeros(raw.shape)
    present = ~np.isnan(raw)
    m = int(present.sum())
    if m >= 2:
        ranks = rankdata(raw[present], method="average")
        out[present] = -1.0 + 2.0 * (ranks - 1.0) / (m - 1)
    return out


def standardize_panel_chars(raw: np.ndarray) -> np.ndarray:
    """Apply :func:`standardize_cross_section` per (month, characteristic)."""
    raw = np.asarray(raw, dtype=float)
    out = np.zeros(raw.shape)
    for t in range(raw.shape[0]):
        for p in range(raw.shape[2]):
            out[t, :, p] = standardize_cross_section(raw[t, :, p])
    return out


def feature_dim(n_chars: int, n_macros: int) -> int:
    return 1 + n_chars + n_macros + n_chars * n_macros


def build_features(z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Regressor vector ``[1, z, x, kron(x, z)]`` of length 1 + P + Q + PQ."""
    z = np.asarray(z, dtype=float).ravel()
    x = np.asarray(x, dtype=float).ravel()
    return np.concatenate(([1.0], z, x, np.kron(x, z)))


def build_feature_array(z: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Vectorized :func:`build_features`.

    ``z`` has shape (..., P) and ``x`` shape (..., Q), broadcast against each
    other on the leading axes; returns shape (..., K).
    """
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    lead = np.broadcast_shapes(z.shape[:-1], x.shape[:-1])
    z = np.broadcast_to(z, lead + z.shape[-1:])
    x = np.broadcast_to(x, lead + x.shape[-1:])
    inter = (x[..., :, None] * z[..., None, :]).reshape(lead + (-1,))
    return np.concatenate((np.ones(lead + (1,)), z, x, inter), axis=-1)


@dataclass(frozen=True)
class SurSystem:
    """Stacked regression system without the zero-padded block matrix.

    ``features[i]`` is the ``T x K`` regressor block of asset ``i`` and
    ``targets[i]`` the matching one-month-ahead returns. ``macro_center`` and
    ``macro_scale`` record the affine map applied to macro predictors so that
    forecasting can reuse it.
    """

    features: np.ndarray
    targets: np.ndarray
    n_chars: int = 0
    n_macros: int = 0
    dates: tuple[str, ...] = ()
    asset_ids: tuple[str, ...] = ()
    macro_center: np.ndarray = field(default_factory=lambda: np.zeros(0))
    macro_scale: np.ndarray = field(default_factory=lambda: np.ones(0))

    def __post_init__(self):
        features = _frozen(self.features)
        targets = _frozen(self.targets)
        if features.ndim != 3 or targets.shape != features.shape[:2]:
            raise ParameterError(f"features {features.shape} and targets {targets.shape} disagree")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "macro_center", _frozen(self.macro_center))
        object.__setattr__(self, "macro_scale", _frozen(self.macro_scale))
        object.__setattr__(self, "dates", tuple(self.dates))
        if not self.asset_ids:
            object.__setattr__(self, "asset_ids", tuple(f"a{i}" for i in range(features.shape[0])))

    @property
    def n_assets(self) -> int:
        return self.features.shape[0]

    @property
    def n_obs(self) -> int:
        return self.features.shape[1]

    @property
    def k(self) -> int:
        return self.features.shape[2]

    @property
    def dims(self) -> dict[str, int]:
        return {"N": self.n_assets, "T": self.n_obs, "K": self.k, "P": self.n_chars, "Q": self.n_macros}

    @property
    def responses(self) -> np.ndarray:
        """Asset-major stacked response vector of length N*T."""
        return self.targets.reshape(-1)

    @property
    def blocks(self) -> list[np.ndarray]:
        return list(self.features)


def build_sur(
    ds: PanelDataset,
    start: str | int,
    end: str | int,
    *,
    standardize_macros: bool = True,
) -> SurSystem:
    """Build the SUR system for the inclusive month window ``[start, end]``.

    Month ``t`` in ``[start, end - 1]`` contributes regressors from ``z_t, x_t``
    and the response ``r_{t+1}``; ``end`` appears only as a response month.
    With ``standardize_macros`` the macro columns are centered and scaled by
    their mean and standard deviation over the regressor months.
    """
    i0, i1 = ds.index_of(start), ds.index_of(end)
    n_window = i1 - i0 + 1
    if n_window < 2:
        raise ParameterError(f"window must span at least 2 months, got {n_window}")
    if n_window < 24:
        logger.warning("estimation window of %d months is short; prior dominates", n_window)
    rows = slice(i0, i1)
    macros = ds.macros[rows]
    if standardize_macros and ds.n_macros:
        center = macros.mean(axis=0)
        scale = macros.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    else:
        center = np.zeros(ds.n_macros)
        scale = np.ones(ds.n_macros)
    x = (macros - center) / scale
    z = ds.chars[rows]  # (T, N, P)
    feats = build_feature_array(z, x[:, None, :])  # (T, N, K)
    return SurSystem(
        features=np.transpose(feats, (1, 0, 2)),
        targets=ds.returns[i0 + 1 : i1 + 1].T,
        n_chars=ds.n_chars,
        n_macros=ds.n_macros,
        dates=ds.dates[i0 : i1 + 1],
        asset_ids=ds.asset_ids,
        macro_center=center,
        macro_scale=scale,
    )


def forecast_features(
    ds: PanelDataset, date: str | int, macro_center: np.ndarray, macro_scale: np.ndarray
) -> np.ndarray:
    """Per-asset regressors (N, K) at month ``date`` for the next-month forecast."""
    t = ds.index_of(date)
    x = (ds.macros[t] - macro_center) / macro_scale
    return build_feature_array(ds.chars[t], x[None, :])


# --------------------------------------------------------------------------
# CSV ingestion


def _read_csv(path: Path, required: Sequence[str]) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing required column(s) {missing}; header is {list(frame.columns)}")
    bad = frame.index[~frame["date"].str.match(_DATE_RE)]
    if len(bad):
        row = int(bad[0])
        raise DataError(f"{path}: row {row + 2}: date {frame['date'][row]!r} is not YYYY-MM")
    return frame


def _numeric(frame: pd.DataFrame, columns: Sequence[str], path: Path, allow_missing: bool) -> np.ndarray:
    out = np.empty((len(frame), len(columns)))
    for j, col in enumerate(columns):
        text = frame[col].str.strip()
        values = pd.to_numeric(text.where(text != ""), errors="coerce")
        bad = values.isna() & (text != "")
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"{path}: row {row + 2}, column {col!r}: non-numeric value {text.iloc[row]!r}")
        if not allow_missing and (text == "").any():
            row = int(np.flatnonzero((text == "").to_numpy())[0])
            raise DataError(f"{path}: row {row + 2}, column {col!r}: missing value")
        # exact decimal parsing (pd.to_numeric may differ in the last ulp)
        out[:, j] = text.where(text != "", "nan").astype(float).to_numpy()
    if not np.all(np.isfinite(out[~np.isnan(out)])):
        raise DataError(f"{path}: non-finite numeric values")
    return out


def _check_duplicates(frame: pd.DataFrame, keys: list[str], path: Path) -> None:
    dup = frame.duplicated(subset=keys, keep="first")
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        key = ", ".join(f"{k}={frame[k].iloc[row]}" for k in keys)
        raise DataError(f"{path}: row {row + 2}: duplicate ({key})")


def load_panel(returns_path, chars_path, macros_path, *, standardize: bool = True) -> PanelDataset:
    """Load the three panel CSVs and align them on their common months.

    ``returns``: ``date,asset,excess_return``; ``chars``: ``date,asset,<char>...``;
    ``macros``: ``date,<macro>...``. Raw characteristics are rank-standardized
    per month; missing characteristic cells (or absent asset rows) become 0.
    Returns and macros must be complete on the common months.
    """
    rpath, cpath, mpath = Path(returns_path), Path(chars_path), Path(macros_path)
    rets = _read_csv(rpath, ["date", "asset", "excess_return"])
    chars = _read_csv(cpath, ["date", "asset"])
    macros = _read_csv(mpath, ["date"])
    _check_duplicates(rets, ["date", "asset"], rpath)
    _check_duplicates(chars, ["date", "asset"], cpath)
    _check_duplicates(macros, ["date"], mpath)

    char_ids = [c for c in chars.columns if c not in ("date", "asset")]
    macro_ids = [c for c in macros.columns if c != "date"]
    r_vals = _numeric(rets, ["excess_return"], rpath, allow_missing=False)[:, 0]
    c_vals = _numeric(chars, char_ids, cpath, allow_missing=True)
    m_vals = _numeric(macros, macro_ids, mpath, allow_missing=False)

    common = sorted(set(rets["date"]) & set(chars["date"]) & set(macros["date"]))
    if len(common) < MIN_COMMON_MONTHS:
        raise DataError(
            f"only {len(common)} common months across {rpath.name}, {cpath.name}, {mpath.name}; "
            f"need at least {MIN_COMMON_MONTHS}"
        )
    asset_ids = list(dict.fromkeys(rets["asset"]))
    d_index = {d: i for i, d in enumerate(common)}
    a_index = {a: i for i, a in enumerate(asset_ids)}
    t, n = len(common), len(asset_ids)

    returns = np.full((t, n), np.nan)
    for d, a, v in zip(rets["date"], rets["asset"], r_vals):
        if d in d_index:
            returns[d_index[d], a_index[a]] = v
    if np.isnan(returns).any():
        ti, ni = np.argwhere(np.isnan(returns))[0]
        raise DataError(f"{rpath}: no return for asset {asset_ids[ni]!r} in {common[ti]}")

    raw = np.full((t, n, len(char_ids)), np.nan)
    for row, (d, a) in enumerate(zip(chars["date"], chars["asset"])):
        if d in d_index:
            if a not in a_index:
                raise DataError(f"{cpath}: row {row + 2}: asset {a!r} absent from returns file")
            raw[d_index[d], a_index[a]] = c_vals[row]
    n_missing = int(np.isnan(raw).sum())
    if n_missing:
        logger.info("imputing %d missing characteristic cells to 0", n_missing)
    std_chars = standardize_panel_chars(raw) if standardize else np.nan_to_num(raw, nan=0.0)

    m_rows = [i for i, d in enumerate(macros["date"]) if d in d_index]
    m_order = np.argsort([d_index[macros["date"].iloc[i]] for i in m_rows])
    macro_arr = m_vals[np.asarray(m_rows, dtype=int)[m_order]]

    return PanelDataset(
        dates=tuple(common),
        returns=returns,
        chars=std_chars,
        macros=macro_arr.reshape(t, len(macro_ids)),
        asset_ids=tuple(asset_ids),
        char_ids=tuple(char_ids),
        macro_ids=tuple(macro_ids),
    )


def write_panel(ds: PanelDataset, directory) -> dict[str, Path]:
    """Write ``returns.csv``, ``chars.csv`` and ``macros.csv`` (lossless floats)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t, n = ds.returns.shape
    dates = np.repeat(np.asarray(ds.dates, dtype=object), n)
    assets = np.tile(np.asarray(ds.asset_ids, dtype=object), t)
    paths = {
        "returns": directory / "returns.csv",
        "chars": directory / "chars.csv",
        "macros": directory / "macros.csv",
    }
    pd.DataFrame({"date": dates, "asset": assets, "excess_return": ds.returns.reshape(-1)}).to_csv(
        paths["returns"], index=False, float_format="%.17g"
    )
    cframe = pd.DataFrame(ds.chars.reshape(t * n, ds.n_chars), columns=list(ds.char_ids))
    cframe.insert(0, "asset", assets)
    cframe.insert(0, "date", dates)
    cframe.to_csv(paths["chars"], index=False, float_format="%.17g")
    mframe = pd.DataFrame(ds.macros, columns=list(ds.macro_ids))
    mframe.insert(0, "date", list(ds.dates))
    mframe.to_csv(paths["macros"], index=False, float_format="%.17g")
    return paths
