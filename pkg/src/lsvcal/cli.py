"""Command line entry point: ``lsvcal {calibrate,validate,compare} --config run.yaml``.

Exit codes: 0 success, 2 invalid config, 3 calibration did not converge,
4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .calibration import CalibrationConfig, CalibrationError, run_calibration
from .leverage import LeverageSurface
from .market_data import (
    DiscountCurve,
    MarketDataError,
    SyntheticSurfaceSpec,
    load_curve,
    load_surface,
    synthesize_surface,
)
from .models import (
    Bergomi2FParams,
    Bergomi2FVasicek,
    ForwardVariance,
    ModelError,
    RoughBergomiVasicek,
    RoughVolParams,
    VasicekParams,
)
from .validation import (
    REPORT_MATURITIES,
    REPORT_MONEYNESS,
    estimator_variance_study,
    reprice_report,
    reprice_seed,
)

log = logging.getLogger("lsvcal")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_IO = 4

MODEL_TYPES = ("rough_bergomi", "bergomi2f")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def _block(cfg, name, required=True):
    blk = cfg.get(name)
    if blk is None:
        if required:
            raise ConfigError(f"missing '{name}' block")
        return {}
    if not isinstance(blk, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    return blk


def _resolve(base, path):
    p = Path(path)
    return p if p.is_absolute() else base / p


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg.setdefault("_base", str(path.parent.resolve()))
    return cfg


def config_hash(cfg):
    """SHA-256 of the canonical JSON form, ignoring the thread count."""
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    calib = dict(clean.get("calibration") or {})
    calib.pop("threads", None)
    clean["calibration"] = calib
    blob = json.dumps(clean, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _forward_variance(spec, surface, base):
    if spec is None or spec == "atm":
        return ForwardVariance.flat(float(surface.implied_vol(surface.spot, min(surface.maturities))) ** 2)
    if isinstance(spec, (int, float)):
        return ForwardVariance.flat(float(spec))
    if isinstance(spec, dict) and "path" in spec:
        return ForwardVariance.from_csv(_resolve(base, spec["path"]))
    raise ConfigError("xi0 must be 'atm', a number or {path: ...}")


def build_rates(cfg):
    params = dict(_block(_block(cfg, "model"), "rates", required=False))
    if "rho_zy" in params and isinstance(params["rho_zy"], list):
        params["rho_zy"] = tuple(params["rho_zy"])
    return VasicekParams(**params)


def build_market(cfg, rates):
    base = Path(cfg["_base"])
    market = _block(cfg, "market")
    spot = float(market.get("spot", 100.0))
    curve_spec = market.get("curve", "model")
    if curve_spec == "model":
        t = np.linspace(0.0, float(market.get("curve_horizon", 10.0)), 1001)
        curve = DiscountCurve(t, rates.zcb(t))
    elif isinstance(curve_spec, dict) and "flat" in curve_spec:
        curve = DiscountCurve.flat(float(curve_spec["flat"]))
    elif isinstance(curve_spec, dict) and "path" in curve_spec:
        curve = load_curve(_resolve(base, curve_spec["path"]))
    else:
        raise ConfigError("market.curve must be 'model', {flat: r} or {path: file}")
    surf_spec = market.get("surface")
    if not isinstance(surf_spec, dict):
        raise ConfigError("market.surface must be a mapping")
    if "path" in surf_spec:
        surface = load_surface(_resolve(base, surf_spec["path"]), spot, curve)
    elif "ssvi" in surf_spec:
        s = dict(surf_spec["ssvi"])
        mats = s.pop("maturities", [0.25, 0.5, 1.0, 2.0])
        surface = synthesize_surface(SyntheticSurfaceSpec.from_ssvi(mats, spot=spot, **s), curve)
    elif "svi" in surf_spec:
        s = surf_spec["svi"]
        spec = SyntheticSurfaceSpec(tuple(s["maturities"]), tuple(tuple(p) for p in s["params"]), spot)
        surface = synthesize_surface(spec, curve)
    else:
        raise ConfigError("market.surface needs one of: path, ssvi, svi")
    return surface, curve


def build_model(cfg, surface, rates):
    m = _block(cfg, "model")
    kind = m.get("type")
    if kind not in MODEL_TYPES:
        raise ConfigError(f"model.type must be one of {MODEL_TYPES}")
    params = dict(m.get("params") or {})
    xi0 = _forward_variance(params.pop("xi0", "atm"), surface, Path(cfg["_base"]))
    if kind == "rough_bergomi":
        rho = params.pop("rho_wz", -0.8)
        return RoughBergomiVasicek(surface.spot, RoughVolParams(xi0=xi0, **params), rates, rho)
    return Bergomi2FVasicek(surface.spot, Bergomi2FParams(xi0=xi0, **params), rates)


def build_calibration_config(cfg, seed, threads, estimator=None):
    blk = dict(_block(cfg, "calibration", required=False))
    known = {f.name for f in fields(CalibrationConfig)}
    unknown = set(blk) - known
    if unknown:
        raise ConfigError(f"unknown calibration keys: {sorted(unknown)}")
    blk["seed"] = seed
    if threads is not None:
        blk["threads"] = threads
    if estimator is not None:
        blk["estimator"] = estimator
    for key in ("strikes", "moneyness_bounds"):
        if key in blk and blk[key] is not None:
            blk[key] = tuple(blk[key])
    return CalibrationConfig(**blk)


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def write_manifest(out, cfg, seed, command):
    _write_json(
        out / f"manifest_{command}.json",
        {
            "command": command,
            "config_hash": config_hash(cfg),
            "seed": seed,
            "config": {k: v for k, v in cfg.items() if not k.startswith("_")},
            "versions": {
                "lsvcal": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
        },
    )


def write_ess(path, diagnostics, method):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "K", "ess", "method"])
        for t, k, e in diagnostics["ess"]:
            w.writerow([repr(float(t)), repr(float(k)), repr(float(e)), method])


def _deterministic_diagnostics(diag):
    return {k: v for k, v in diag.items() if k not in ("timings", "ess")} | {
        "slices": [{k: v for k, v in s.items() if k != "seconds"} for s in diag["slices"]]
    }


def _write_calibration(out, diagnostics, leverage, method, suffix=""):
    if leverage is not None and len(leverage):
        leverage.to_csv(out / f"leverage{suffix}.csv")
    _write_json(out / f"diagnostics{suffix}.json", _deterministic_diagnostics(diagnostics))
    # wall-clock timings live apart from the reproducible artifacts
    timings = dict(diagnostics.get("timings", {}))
    timings["slices"] = [s.get("seconds", 0.0) for s in diagnostics["slices"]]
    _write_json(out / f"timings{suffix}.json", timings)
    write_ess(out / f"ess{suffix}.csv", diagnostics, method)


def write_smiles(out, report, prefix="smile"):
    for T in np.unique(report.T):
        K, tgt, iv, se = report.smile(T)
        with open(out / f"{prefix}_T{T:g}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["K", "target_iv", "model_iv", "se_bps"])
            for row in zip(K, tgt, iv, se):
                w.writerow([repr(float(x)) for x in row])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _validation_block(cfg):
    v = _block(cfg, "validation", required=False)
    return {
        "maturities": tuple(v.get("maturities", REPORT_MATURITIES)),
        "moneyness": tuple(v.get("moneyness", REPORT_MONEYNESS)),
        "n_particles": v.get("n_particles"),
        "replications": int(v.get("replications", 30)),
        "study_time": float(v.get("study_time", 0.5)),
        "study_interval": int(v.get("study_interval", 21)),
        "study_particles": int(v.get("study_particles", 10_000)),
        "study_strikes": v.get("study_strikes"),
    }


def _setup(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    out = Path(args.out or _block(cfg, "output", required=False).get("directory", "out"))
    rates = build_rates(cfg)
    surface, curve = build_market(cfg, rates)
    model = build_model(cfg, surface, rates)
    return cfg, seed, out, surface, curve, model


def cmd_calibrate(args):
    """Calibrate the leverage surface and write it with diagnostics."""
    cfg, seed, out, surface, curve, model = _setup(args)
    config = build_calibration_config(cfg, seed, args.threads)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, seed, "calibrate")
    try:
        result = run_calibration(config, model, surface, curve)
    except CalibrationError as exc:
        if exc.diagnostics is not None:
            _write_calibration(out, exc.diagnostics, exc.leverage, config.estimator)
        log.error("calibration did not converge: %s", exc)
        return EXIT_NO_CONVERGENCE
    _write_calibration(out, result.diagnostics, result.leverage, config.estimator)
    log.info("wrote %s", out / "leverage.csv")
    return EXIT_OK


def cmd_validate(args):
    """Reprice vanillas under a calibrated leverage surface."""
    cfg, seed, out, surface, curve, model = _setup(args)
    config = build_calibration_config(cfg, seed, args.threads)
    v = _validation_block(cfg)
    lev_path = Path(_block(cfg, "validation", required=False).get("leverage", out / "leverage.csv"))
    if not lev_path.exists():
        raise FileNotFoundError(f"leverage artifact {lev_path} not found; run 'calibrate' first")
    leverage = LeverageSurface.from_csv(lev_path)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, seed, "validate")
    report = reprice_report(model, leverage, surface, curve, v["n_particles"] or config.n_particles,
                            reprice_seed(seed), config.dt, v["maturities"], v["moneyness"], threads=config.threads)
    report.to_csv(out / "reprice_report.csv")
    write_smiles(out, report)
    _write_json(out / "reprice_summary.json", report.summary(maturities=v["maturities"]))
    return EXIT_OK


def cmd_compare(args):
    """Calibrate with each estimator and run the estimator variance study."""
    cfg, seed, out, surface, curve, model = _setup(args)
    methods = tuple(_block(cfg, "compare", required=False).get("methods", ("exact", "lognormal", "kernel")))
    if "lognormal" in methods and not getattr(model, "lognormal", False):
        raise ConfigError(f"the lognormal method needs a lognormal variance model, got {type(model).__name__}")
    v = _validation_block(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, seed, "compare")
    reports = {}
    status = EXIT_OK
    for method in methods:
        config = build_calibration_config(cfg, seed, args.threads, estimator=method)
        try:
            result = run_calibration(config, model, surface, curve)
        except CalibrationError as exc:
            log.error("%s calibration did not converge: %s", method, exc)
            if exc.diagnostics is not None:
                _write_calibration(out, exc.diagnostics, exc.leverage, method, f"_{method}")
            status = EXIT_NO_CONVERGENCE
            continue
        _write_calibration(out, result.diagnostics, result.leverage, method, f"_{method}")
        rep = reprice_report(model, result.leverage, surface, curve, v["n_particles"] or config.n_particles,
                             reprice_seed(seed), config.dt, v["maturities"], v["moneyness"], threads=config.threads)
        rep.to_csv(out / f"reprice_report_{method}.csv")
        reports[method] = rep
    if reports:
        first = next(iter(reports.values()))
        for T in np.unique(first.T):
            with open(out / f"compare_T{T:g}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["K", "target_iv"] + [f"{m}_iv" for m in reports] + [f"{m}_se_bps" for m in reports])
                K, tgt, _, _ = first.smile(T)
                cols = [reports[m].smile(T) for m in reports]
                for j in range(K.size):
                    w.writerow([repr(float(K[j])), repr(float(tgt[j]))] + [repr(float(c[2][j])) for c in cols]
                               + [repr(float(c[3][j])) for c in cols])
    strikes = v["study_strikes"] or [0.9 * model.spot, model.spot, 1.1 * model.spot]
    study = estimator_variance_study(
        model, v["study_time"], strikes, v["replications"], v["study_particles"], seed,
        build_calibration_config(cfg, seed, args.threads).dt, interval=v["study_interval"],
        methods=tuple(m for m in methods if m != "lognormal" or v["study_interval"] == 1),
    )
    study.to_csv(out / "variance_study.csv")
    return status


COMMANDS = {"calibrate": cmd_calibrate, "validate": cmd_validate, "compare": cmd_compare}


def build_parser():
    parser = argparse.ArgumentParser(prog="lsvcal", description="Monte Carlo LSV leverage calibration.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip() or None)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=None, help="worker threads; outputs do not depend on it")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        log.error("--seed must be an unsigned 64-bit integer")
        return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        log.error("--threads must be >= 1")
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ConfigError, MarketDataError, ModelError, ValueError, TypeError, KeyError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
