"""Command-line front end.

Every command resolves a JSON run configuration (flags > ``--config`` file >
defaults), writes it to ``<out>/run_config.json`` and emits its artifacts
into ``--out`` only. Replaying the persisted file with ``--config``
reproduces the outputs byte for byte.

Config schema (all keys optional)::

    {
      "command": "fit" | "predict" | "backtest" | "generate" | "diagnose",
      "seed": 0, "jobs": null, "log_level": "INFO",
      "data": {"returns": path, "chars": path, "macros": path,
               "factors": path, "anomalies": path, "standardize_chars": true},
      "sampler": {"n_total": 3000, "n_burn": 1000, "prior": "mild",
                  "method": "auto", "joint_threshold": 4000,
                  "nu_sigma": null, "v_sigma": null},
      "fit": {"start": null, "end": null, "standardize_macros": true, "trace_n_b": 50},
      "predict": {"model": path, "date": null, "level": 0.95},
      "backtest": {"window_months": 252, "refit_every_months": 12,
                   "rebalance_every_months": 1, "strategy": "bh", "gamma": 5.0,
                   "gamma_grid": [2, 5, 10], "use_total_cov": true,
                   "ma_window": null, "interval_level": 0.95,
                   "subperiod_splits": [], "factor_models": null, "hac_lags": null,
                   "constraints": {"long_only": true, "full_investment": true,
                                   "max_weight": 0.5, "max_turnover": 0.5}},
      "generate": {"n_assets": 5, "n_chars": 3, "n_macros": 2, "n_months": 300,
                   "start": "2000-01", "common_sd": 0.01, "asset_sd": 0.005,
                   "noise_sd": 0.05, "corr": 0.3},
      "diagnose": {"trace": path}
    }
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .backtest import BacktestConfig, SamplerConfig, run_backtest
from .errors import BHError, DataError, ParameterError
from .panel import build_sur, forecast_features, load_panel, write_panel
from .portfolio import PortfolioConstraints
from .predictive import predict_moments, predictive_interval
from .sampler import FittedModel, default_hyperparams, diagnostics, diagnostics_from_trace, run_chain
from .synthetic import draw_truth, generate_synthetic_panel

logger = logging.getLogger("bhalloc.cli")

COMMANDS = ("fit", "predict", "backtest", "generate", "diagnose")

DEFAULTS: dict = {
    "seed": 0,
    "jobs": None,
    "log_level": "INFO",
    "data": {
        "returns": None,
        "chars": None,
        "macros": None,
        "factors": None,
        "anomalies": None,
        "standardize_chars": True,
    },
    "sampler": {
        "n_total": 3000,
        "n_burn": 1000,
        "prior": "mild",
        "method": "auto",
        "joint_threshold": 4000,
        "nu_sigma": None,
        "v_sigma": None,
    },
    "fit": {"start": None, "end": None, "standardize_macros": True, "trace_n_b": 50},
    "predict": {"model": None, "date": None, "level": 0.95},
    "backtest": {
        "window_months": 252,
        "refit_every_months": 12,
        "rebalance_every_months": 1,
        "strategy": "bh",
        "gamma": 5.0,
        "gamma_grid": [2.0, 5.0, 10.0],
        "use_total_cov": True,
        "ma_window": None,
        "interval_level": 0.95,
        "subperiod_splits": [],
        "factor_models": None,
        "hac_lags": None,
        "constraints": {"long_only": True, "full_investment": True, "max_weight": 0.5, "max_turnover": 0.5},
    },
    "generate": {
        "n_assets": 5,
        "n_chars": 3,
        "n_macros": 2,
        "n_months": 300,
        "start": "2000-01",
        "common_sd": 0.01,
        "asset_sd": 0.005,
        "noise_sd": 0.05,
        "corr": 0.3,
    },
    "diagnose": {"trace": None},
}

PATH_KEYS = [("data", k) for k in ("returns", "chars", "macros", "factors", "anomalies")] + [
    ("predict", "model"),
    ("diagnose", "trace"),
]


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base and key != "command":
            raise ParameterError(f"unknown config key {where + key!r}")
        if isinstance(base.get(key), dict) and key != "factor_models":
            if not isinstance(value, dict):
                raise ParameterError(f"config key {where + key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


# --------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", required=True, help="output directory (created if absent)")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="parallel window fits (default: available cores)")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="only log errors")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data-dir", help="directory holding returns.csv, chars.csv and macros.csv")
    data.add_argument("--returns")
    data.add_argument("--chars")
    data.add_argument("--macros")

    sampler = argparse.ArgumentParser(add_help=False)
    sampler.add_argument("--prior", choices=["mild", "tight"])
    sampler.add_argument("--n-total", type=int)
    sampler.add_argument("--n-burn", type=int)
    sampler.add_argument("--method", choices=["auto", "joint", "blocked"])

    parser = argparse.ArgumentParser(prog="bhalloc", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common, data, sampler], help="fit the sampler on one window")
    p.add_argument("--start", help="first month of the window (YYYY-MM)")
    p.add_argument("--end", help="last month of the window (YYYY-MM)")

    p = sub.add_parser("predict", parents=[common, data], help="predictive moments from a fitted model")
    p.add_argument("--model", help="fitted_model.json from 'fit'")
    p.add_argument("--date", help="month whose regressors are used (default: last)")

    p = sub.add_parser("backtest", parents=[common, data, sampler], help="rolling backtest")
    p.add_argument("--gamma", type=float)
    p.add_argument("--strategy", choices=["bh", "ma", "ew"])
    p.add_argument("--window", type=int, dest="window_months")
    p.add_argument("--factors", help="CSV with date plus factor columns (optional rf)")
    p.add_argument("--anomalies", help="CSV with date plus anomaly return columns")

    p = sub.add_parser("generate", parents=[common], help="simulate a synthetic panel")
    p.add_argument("--n-assets", type=int)
    p.add_argument("--n-chars", type=int)
    p.add_argument("--n-macros", type=int)
    p.add_argument("--n-months", type=int)

    p = sub.add_parser("diagnose", parents=[common], help="ESS summary of a trace CSV")
    p.add_argument("--trace", help="trace.csv from 'fit'")
    return parser


def _flag_overrides(args: argparse.Namespace) -> dict:
    ov: dict = {}

    def put(section, key, value):
        if value is not None:
            if section is None:
                ov[key] = value
            else:
                ov.setdefault(section, {})[key] = value

    put(None, "seed", args.seed)
    put(None, "jobs", args.jobs)
    put(None, "log_level", args.log_level)
    if getattr(args, "data_dir", None):
        for name in ("returns", "chars", "macros"):
            put("data", name, str(Path(args.data_dir) / f"{name}.csv"))
    for name in ("returns", "chars", "macros", "factors", "anomalies"):
        put("data", name, getattr(args, name, None))
    put("sampler", "prior", getattr(args, "prior", None))
    put("sampler", "n_total", getattr(args, "n_total", None))
    put("sampler", "n_burn", getattr(args, "n_burn", None))
    put("sampler", "method", getattr(args, "method", None))
    put("fit", "start", getattr(args, "start", None))
    put("fit", "end", getattr(args, "end", None))
    put("predict", "model", getattr(args, "model", None))
    put("predict", "date", getattr(args, "date", None))
    put("backtest", "gamma", getattr(args, "gamma", None))
    put("backtest", "strategy", getattr(args, "strategy", None))
    put("backtest", "window_months", getattr(args, "window_months", None))
    for name in ("n_assets", "n_chars", "n_macros", "n_months"):
        put("generate", name, getattr(args, name, None))
    put("diagnose", "trace", getattr(args, "trace", None))
    return ov


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            from_file = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(from_file, dict):
            raise ParameterError(f"{path}: top level must be an object")
        cfg_cmd = from_file.get("command")
        if cfg_cmd is not None and cfg_cmd != args.command:
            raise ParameterError(f"{path} was written for command {cfg_cmd!r}, not {args.command!r}")
        cfg = _merge(cfg, from_file)
    cfg = _merge(cfg, _flag_overrides(args))
    cfg["command"] = args.command
    for section, key in PATH_KEYS:
        if cfg[section][key] is not None:
            cfg[section][key] = str(Path(cfg[section][key]).resolve())
    if cfg["jobs"] is None:
        cfg["jobs"] = os.cpu_count() or 1
    if int(cfg["jobs"]) < 1:
        raise ParameterError(f"jobs must be >= 1, got {cfg['jobs']}")
    gamma = cfg["backtest"]["gamma"]
    if not isinstance(gamma, (int, float)) or not gamma > 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    return cfg


# --------------------------------------------------------------------------
# Helpers


def _load_data(cfg: dict):
    d = cfg["data"]
    missing = [k for k in ("returns", "chars", "macros") if d[k] is None]
    if missing:
        raise ParameterError(f"data paths not configured: {missing} (use --data-dir or --returns/--chars/--macros)")
    return load_panel(d["returns"], d["chars"], d["macros"], standardize=d["standardize_chars"])


def _read_dated(path: str, what: str) -> pd.DataFrame:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} file not found: {p}")
    frame = pd.read_csv(p, dtype={"date": str}, float_precision="round_trip")
    if "date" not in frame.columns:
        raise DataError(f"{p}: missing 'date' column")
    if frame["date"].duplicated().any():
        raise DataError(f"{p}: duplicate dates")
    return frame.set_index("date").astype(float)


def _sampler_config(cfg: dict) -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(
        n_total=int(s["n_total"]),
        n_burn=int(s["n_burn"]),
        prior=s["prior"],
        seed=int(cfg["seed"]),
        method=s["method"],
        joint_threshold=int(s["joint_threshold"]),
        nu_sigma=s["nu_sigma"],
        v_sigma=s["v_sigma"],
    )


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Commands


def cmd_generate(cfg: dict, out: Path) -> dict:
    g = cfg["generate"]
    truth = draw_truth(
        int(g["n_assets"]),
        int(g["n_chars"]),
        int(g["n_macros"]),
        seed=int(cfg["seed"]),
        common_sd=g["common_sd"],
        asset_sd=g["asset_sd"],
        noise_sd=g["noise_sd"],
        corr=g["corr"],
    )
    ds, truth = generate_synthetic_panel(truth, int(g["n_months"]), seed=int(cfg["seed"]), start=g["start"])
    paths = write_panel(ds, out)
    truth.write_json(out / "truth.json")
    logger.info("wrote %d months x %d assets to %s", ds.n_months, ds.n_assets, out)
    return {name: str(p) for name, p in paths.items()}


def cmd_fit(cfg: dict, out: Path) -> dict:
    ds = _load_data(cfg)
    f = cfg["fit"]
    start = ds.index_of(f["start"]) if f["start"] is not None else 0
    end = ds.index_of(f["end"]) if f["end"] is not None else ds.n_months - 1
    sys_ = build_sur(ds, start, end, standardize_macros=f["standardize_macros"])
    sc = _sampler_config(cfg)
    hp = default_hyperparams(sc.prior, sys_.n_assets, sys_.k, nu_sigma=sc.nu_sigma, v_sigma=sc.v_sigma)
    draws = run_chain(
        sys_, hp, sc.n_total, sc.n_burn, sc.seed, method=sc.method, joint_threshold=sc.joint_threshold
    )
    model = FittedModel.from_draws(draws, sys_, hp, meta={"prior": sc.prior})
    model.write_json(out / "fitted_model.json")
    diag = diagnostics(draws, n_b=int(f["trace_n_b"]), seed=sc.seed)
    diag.write_trace_csv(out / "trace.csv", start_iteration=sc.n_burn)
    diag.write_json(out / "diagnostics.json")
    summary = diag.summary()
    logger.info("ESS/n: min %.3f, mean %.3f", summary["min_ess_ratio"], summary["mean_ess_ratio"])
    return {"min_ess_ratio": summary["min_ess_ratio"], "mean_ess_ratio": summary["mean_ess_ratio"]}


def cmd_predict(cfg: dict, out: Path) -> dict:
    p = cfg["predict"]
    if p["model"] is None:
        raise ParameterError("predict needs a fitted model (--model)")
    mpath = Path(p["model"])
    if not mpath.exists():
        raise FileNotFoundError(f"model file not found: {mpath}")
    model = FittedModel.read_json(mpath)
    ds = _load_data(cfg)
    if list(ds.asset_ids) != list(model.asset_ids):
        raise DataError(f"panel assets {list(ds.asset_ids)} do not match the fitted model's {model.asset_ids}")
    date = p["date"] if p["date"] is not None else ds.dates[-1]
    feats = forecast_features(ds, date, model.macro_center, model.macro_scale)
    m = predict_moments(model, feats)
    total = predictive_interval(m, p["level"], use_total=True)
    param = predictive_interval(m, p["level"], use_total=False)
    frame = pd.DataFrame(
        {
            "asset": list(ds.asset_ids),
            "mean": m.mean,
            "sd_total": np.sqrt(np.diag(m.cov_total)),
            "lower": total.lower,
            "upper": total.upper,
            "lower_param": param.lower,
            "upper_param": param.upper,
        }
    )
    frame.to_csv(out / "predictions.csv", index=False, float_format="%.17g")
    _write_json(
        out / "predictive.json",
        {
            "date": date,
            "level": p["level"],
            "asset_ids": list(ds.asset_ids),
            "mean": m.mean.tolist(),
            "cov_param": m.cov_param.tolist(),
            "cov_resid": m.cov_resid.tolist(),
            "cov_total": m.cov_total.tolist(),
        },
    )
    return {"date": date}


def cmd_backtest(cfg: dict, out: Path) -> dict:
    ds = _load_data(cfg)
    b = cfg["backtest"]
    c = b["constraints"]
    bt = BacktestConfig(
        window_months=int(b["window_months"]),
        refit_every_months=int(b["refit_every_months"]),
        rebalance_every_months=int(b["rebalance_every_months"]),
        strategy=b["strategy"],
        gamma=float(b["gamma"]),
        gamma_grid=tuple(b["gamma_grid"]),
        constraints=PortfolioConstraints(
            long_only=c["long_only"],
            full_investment=c["full_investment"],
            max_weight=c["max_weight"],
            max_turnover=c["max_turnover"],
        ),
        sampler=_sampler_config(cfg),
        use_total_cov=b["use_total_cov"],
        ma_window=b["ma_window"],
        interval_level=b["interval_level"],
        subperiod_splits=tuple(b["subperiod_splits"]),
        factor_models=b["factor_models"],
        hac_lags=b["hac_lags"],
        jobs=int(cfg["jobs"]),
    )
    factors = _read_dated(cfg["data"]["factors"], "factors") if cfg["data"]["factors"] else None
    anomalies = _read_dated(cfg["data"]["anomalies"], "anomalies") if cfg["data"]["anomalies"] else None
    report = run_backtest(ds, bt, factors=factors, anomalies=anomalies)
    report.write(out)
    overall = report.metrics["performance"]["overall"]
    logger.info("avg return %.5f, Sharpe %s", overall["avg_return"], overall["sharpe_annualized"])
    return {"avg_return": overall["avg_return"]}


def cmd_diagnose(cfg: dict, out: Path) -> dict:
    t = cfg["diagnose"]["trace"]
    if t is None:
        raise ParameterError("diagnose needs a trace CSV (--trace)")
    if not Path(t).exists():
        raise FileNotFoundError(f"trace file not found: {t}")
    diag = diagnostics_from_trace(t)
    diag.write_json(out / "diagnostics.json")
    s = diag.summary()
    return {"min_ess_ratio": s["min_ess_ratio"], "mean_ess_ratio": s["mean_ess_ratio"]}


HANDLERS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "backtest": cmd_backtest,
    "generate": cmd_generate,
    "diagnose": cmd_diagnose,
}


def _setup_logging(level: str, quiet: bool) -> None:
    root = logging.getLogger("bhalloc")
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s [%(name)s] %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.ERROR if quiet else getattr(logging, level))
    root.propagate = False


def _emit_error(exc: BaseException, code: int) -> int:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code}}
    for attr in ("pivot", "iteration", "constraint"):
        if getattr(exc, attr, None) is not None:
            payload["error"][attr] = getattr(exc, attr)
    if isinstance(exc, FileNotFoundError) and exc.filename:
        payload["error"]["path"] = str(exc.filename)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    root = logging.getLogger("bhalloc")
    saved = (list(root.handlers), root.level, root.propagate)
    try:
        return _run(args)
    finally:
        root.handlers[:] = saved[0]
        root.setLevel(saved[1])
        root.propagate = saved[2]


def _run(args: argparse.Namespace) -> int:
    _setup_logging(args.log_level or "INFO", args.quiet)
    try:
        cfg = resolve_config(args)
        _setup_logging(cfg["log_level"] if not args.log_level else args.log_level, args.quiet)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "run_config.json", cfg)
        result = HANDLERS[args.command](cfg, out)
        logger.info("%s finished: %s", args.command, json.dumps(result, sort_keys=True))
        return 0
    except FileNotFoundError as exc:
        return _emit_error(exc, 2)
    except BHError as exc:
        return _emit_error(exc, exc.exit_code)
    except (OSError, json.JSONDecodeError) as exc:
        return _emit_error(exc, 3)
    except Exception as exc:  # noqa: BLE001 - report unexpected failures in the same format
        return _emit_error(exc, 1)


if __name__ == "__main__":
    raise SystemExit(main())
