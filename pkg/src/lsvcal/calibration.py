"""Forward predictor-corrector calibration of the leverage function.

Particles are diffused from one calibration knot to the next with the leverage
frozen at the knot-start spot (predictor). The next leverage slice is then set
from the ratio of Dupire local variance, corrected for stochastic rates, to
the conditional expectation of discounted variance (corrector).
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_in_range, check_int, check_positive, check_sorted
from .estimators import (
    DEFAULT_D_MAX,
    EstimatorError,
    bandwidth_rule,
    exact_conditional_ratio,
    indicator_rate_term,
    kernel_conditional_ratio,
    lognormal_conditional_ratio,
    rate_adjustment_term,
)
from .leverage import LeverageSurface
from .market_data import DiscountCurve, VolSurface, call_price_derivatives, dupire_local_vol
from .models import HybridModel, TimeGrid, conditional_lognormal_params
from .particles import ParticleEnsemble

ESTIMATORS = ("exact", "lognormal", "kernel")

__all__ = [
    "CalibrationConfig",
    "CalibrationError",
    "CalibrationResult",
    "LSVCalibrator",
    "LeverageSurface",
    "SliceResult",
    "calibration_step",
    "initialize_leverage",
    "knot_strikes",
    "run_calibration",
]


class CalibrationError(RuntimeError):
    """Calibration aborted; carries the failing slice and the diagnostics so far."""

    def __init__(self, message, slice_index=None, diagnostics=None, leverage=None):
        super().__init__(message)
        self.slice_index = slice_index
        self.diagnostics = diagnostics
        self.leverage = leverage


@dataclass
class CalibrationConfig:
    """Numerical settings of a calibration run.

    ``strikes`` fixes one strike grid for every slice. When it is ``None`` each
    slice gets ``n_strikes`` geometric nodes spanning ``n_std`` ATM standard
    deviations around the forward, clipped to ``moneyness_bounds``.
    """

    n_particles: int = 50_000
    dt: float = 1.0 / 252
    horizon: float = 2.0
    knot_stride: int = 1
    estimator: str = "exact"
    seed: int = 0
    d_max: float = DEFAULT_D_MAX
    strikes: tuple | None = None
    n_strikes: int = 25
    moneyness_bounds: tuple = (0.5, 2.0)
    n_std: float = 4.0
    floor_fraction: float = 0.05
    max_floored_fraction: float = 0.2
    min_ess: float = 10.0
    kernel_kappa: float = 1.5
    threads: int = 1

    def __post_init__(self):
        check_int(self.n_particles, "n_particles", minimum=1000)
        check_positive(self.dt, "dt")
        check_positive(self.horizon, "horizon")
        check_int(self.knot_stride, "knot_stride", minimum=1)
        check_int(self.seed, "seed", minimum=0)
        check_int(self.n_strikes, "n_strikes", minimum=2)
        check_int(self.threads, "threads", minimum=1)
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")
        lo, hi = self.moneyness_bounds
        if not 0 < lo < 1 < hi:
            raise ValueError("moneyness_bounds must satisfy 0 < lo < 1 < hi")
        check_positive(self.n_std, "n_std")
        check_in_range(self.floor_fraction, "floor_fraction", 0.0, 1.0, lo_open=True)
        check_in_range(self.max_floored_fraction, "max_floored_fraction", 0.0, 1.0)
        check_positive(self.kernel_kappa, "kernel_kappa")
        if self.strikes is not None:
            self.strikes = tuple(float(k) for k in self.strikes)
            check_positive(self.strikes, "strikes")
            check_sorted(self.strikes, "strikes", strict=True)
            if len(self.strikes) < 2:
                raise ValueError("need at least two strikes")
        self.moneyness_bounds = (float(lo), float(hi))

    @property
    def grid(self) -> TimeGrid:
        n = int(math.ceil(self.horizon / self.dt - 1e-9))
        n = int(math.ceil(n / self.knot_stride)) * self.knot_stride
        return TimeGrid(self.dt, n)

    @property
    def knot_steps(self):
        return np.arange(0, self.grid.n_steps + 1, self.knot_stride)

    @property
    def knot_times(self):
        return self.knot_steps * self.dt

    def to_dict(self):
        return asdict(self)


@dataclass
class SliceResult:
    t: float
    strikes: np.ndarray
    values: np.ndarray
    local_vol: np.ndarray
    ess: np.ndarray
    floored: list = field(default_factory=list)
    no_mass: list = field(default_factory=list)
    rate_term: np.ndarray | None = None
    seconds: float = 0.0


@dataclass
class CalibrationResult:
    leverage: LeverageSurface
    diagnostics: dict
    slices: list


def knot_strikes(config: CalibrationConfig, surface: VolSurface, curve: DiscountCurve, t):
    """Strike nodes of the slice at ``t``."""
    if config.strikes is not None:
        return np.array(config.strikes)
    t_eff = max(t, config.dt)
    fwd = float(curve.forward(surface.spot, t_eff))
    atm = float(surface.implied_vol(fwd, t_eff))
    half = config.n_std * atm * math.sqrt(t_eff)
    lo = max(config.moneyness_bounds[0], math.exp(-half))
    hi = min(config.moneyness_bounds[1], math.exp(half))
    return fwd * np.geomspace(lo, hi, config.n_strikes)


def initialize_leverage(local_vol, V0):
    """First slice ``sigma_Dup / sqrt(V0)`` from local vols at the strike nodes."""
    check_positive(V0, "V0")
    lv = np.asarray(local_vol, float)
    if np.any(~(lv > 0)):
        raise CalibrationError("non-positive local volatility at an initial node", slice_index=0)
    return lv / math.sqrt(V0)


def _conditional_ratio(config, model, ensemble, params, K, atm_vol):
    D, V = ensemble.D, ensemble.V
    if config.estimator == "exact":
        return exact_conditional_ratio(params, D, V, K, d_max=config.d_max, strict=False)
    if config.estimator == "lognormal":
        clp = conditional_lognormal_params(model, ensemble.step - 1, ensemble.paths)
        return lognormal_conditional_ratio(clp, params, D, K, strict=False)
    h = bandwidth_rule(ensemble.paths.n_particles, ensemble.t, atm_vol, model.spot, config.kernel_kappa)
    return kernel_conditional_ratio(ensemble.S, V, D, K, h, strict=False)


def _rate_term(config, model, ensemble, params, K, rbar):
    if model.deterministic_rates:
        return np.zeros(K.size)
    if config.estimator == "kernel":
        return indicator_rate_term(ensemble.S, ensemble.D, ensemble.r, K, rbar)
    return rate_adjustment_term(params, ensemble.D, ensemble.r, K, rbar, model.spot)


def calibration_step(ensemble: ParticleEnsemble, leverage: LeverageSurface, surface: VolSurface,
                     curve: DiscountCurve, config: CalibrationConfig, model: HybridModel) -> SliceResult:
    """Diffuse under the last slice for one knot interval, then correct the next slice."""
    start = time.perf_counter()
    i = len(leverage)
    lam = leverage.evaluate_slice(i - 1, ensemble.S)
    params = ensemble.advance(lam, config.knot_stride)
    if not np.all(np.isfinite(ensemble.log_s)):
        raise CalibrationError("particles diverged", slice_index=i)
    t = ensemble.t
    K = knot_strikes(config, surface, curve, t)
    sigma_dup = dupire_local_vol(surface, curve, K, t)
    c_kk = call_price_derivatives(surface, curve, K, t).dKK
    rbar = float(curve.mean_short_rate(t))
    atm_vol = float(surface.implied_vol(curve.forward(surface.spot, t), t))

    est = _conditional_ratio(config, model, ensemble, params, K, atm_vol)
    rate = _rate_term(config, model, ensemble, params, K, rbar)
    rhs = sigma_dup**2 - rate / (0.5 * K * np.maximum(c_kk, 1e-10 / surface.spot))
    ratio = np.asarray(est.value, float)
    ess = np.asarray(est.effective_sample_size, float)

    valid = np.isfinite(ratio) & (ratio > 0) & (ess >= config.min_ess)
    floor = (config.floor_fraction * sigma_dup) ** 2
    hit = valid & ~(rhs >= floor)
    rhs = np.where(hit, floor, rhs)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.sqrt(rhs / ratio)
    if not np.any(valid):
        raise CalibrationError(f"no particle mass at any strike node at t={t:.6g}", slice_index=i)
    logk = np.log(K)
    values = np.where(valid, values, np.interp(logk, logk[valid], values[valid]))
    return SliceResult(
        t=t,
        strikes=K,
        values=values,
        local_vol=sigma_dup,
        ess=ess,
        floored=[int(j) for j in np.flatnonzero(hit)],
        no_mass=[int(j) for j in np.flatnonzero(~valid)],
        rate_term=np.asarray(rate, float),
        seconds=time.perf_counter() - start,
    )


def _slice_record(i, res: SliceResult):
    ess = res.ess[np.isfinite(res.ess)]
    return {
        "i": i,
        "t": res.t,
        "n_floored": len(res.floored),
        "n_no_mass": len(res.no_mass),
        "ess_min": float(ess.min()) if ess.size else 0.0,
        "ess_median": float(np.median(ess)) if ess.size else 0.0,
        "seconds": res.seconds,
    }


def run_calibration(config: CalibrationConfig, model: HybridModel, surface: VolSurface, curve: DiscountCurve,
                    threads=None) -> CalibrationResult:
    """Calibrate a leverage surface to ``surface`` on the knots of ``config``.

    Diagnostics list floored nodes as ``(i, j)`` pairs (slice, strike index),
    per-slice effective sample sizes and timings. Timings are the only
    non-deterministic entries.
    """
    if config.estimator == "lognormal" and config.knot_stride != 1:
        raise ValueError("the lognormal estimator needs knot_stride = 1")
    if config.estimator == "lognormal" and not getattr(model, "lognormal", False):
        raise ValueError(f"{type(model).__name__} has no lognormal variance")
    threads = config.threads if threads is None else threads
    t0 = time.perf_counter()
    grid = config.grid
    paths = model.simulate(grid, config.n_particles, seed=config.seed,
                           lognormal=config.estimator == "lognormal", threads=threads)
    t_sim = time.perf_counter() - t0

    leverage = LeverageSurface()
    K0 = knot_strikes(config, surface, curve, 0.0)
    lv0 = dupire_local_vol(surface, curve, K0, config.dt)
    leverage.append(0.0, K0, initialize_leverage(lv0, model.v0))
    ensemble = ParticleEnsemble(paths, model.spot)
    diagnostics = {
        "converged": False,
        "estimator": config.estimator,
        "n_particles": config.n_particles,
        "seed": config.seed,
        "floored_nodes": [],
        "no_mass_nodes": [],
        "slices": [],
        "ess": [[0.0, float(k), float(config.n_particles)] for k in K0],
        "timings": {"simulation": t_sim},
        "abort": None,
    }
    slices = []
    n_knots = len(config.knot_steps)
    for i in range(1, n_knots):
        try:
            res = calibration_step(ensemble, leverage, surface, curve, config, model)
        except (CalibrationError, EstimatorError) as exc:
            diagnostics["abort"] = {"slice": i, "reason": str(exc)}
            raise CalibrationError(str(exc), i, diagnostics, leverage) from exc
        slices.append(res)
        diagnostics["slices"].append(_slice_record(i, res))
        diagnostics["floored_nodes"].extend([i, j] for j in res.floored)
        diagnostics["no_mass_nodes"].extend([i, j] for j in res.no_mass)
        diagnostics["ess"].extend([res.t, float(k), float(e)] for k, e in zip(res.strikes, res.ess))
        n_valid = len(res.strikes) - len(res.no_mass)
        if len(res.floored) > config.max_floored_fraction * n_valid:
            msg = (f"slice {i} (t={res.t:.4f}): {len(res.floored)} of {n_valid} nodes floored; "
                   "calibration does not converge")
            diagnostics["abort"] = {"slice": i, "reason": msg}
            leverage.append(res.t, res.strikes, res.values)
            raise CalibrationError(msg, i, diagnostics, leverage)
        leverage.append(res.t, res.strikes, res.values)
    diagnostics["converged"] = True
    diagnostics["timings"]["calibration"] = time.perf_counter() - t0
    return CalibrationResult(leverage, diagnostics, slices)


class LSVCalibrator(BaseEstimator):
    """Estimator wrapper around :func:`run_calibration`.

    ``fit(surface, curve)`` learns ``leverage_``; ``predict`` reprices
    ``(T, K)`` rows on fresh paths and returns model implied vols.
    """

    def __init__(self, model=None, config=None, reprice_particles=None):
        self.model = model
        self.config = config
        self.reprice_particles = reprice_particles

    def fit(self, surface, curve):
        if self.model is None:
            raise ValueError("LSVCalibrator needs a model")
        config = self.config if self.config is not None else CalibrationConfig()
        result = run_calibration(config, self.model, surface, curve)
        self.leverage_ = result.leverage
        self.diagnostics_ = result.diagnostics
        self.curve_ = curve
        self.surface_ = surface
        self.config_ = config
        return self

    def predict(self, X):
        from .validation import price_european, reprice_seed, implied_vol

        check_is_fitted(self, "leverage_")
        X = np.asarray(X, float)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError("X must have shape (n, 2) with columns (T, K)")
        cfg = self.config_
        M = self.reprice_particles or cfg.n_particles
        mats = np.unique(X[:, 0])
        out = np.empty(len(X))
        for T in mats:
            rows = np.flatnonzero(X[:, 0] == T)
            K = X[rows, 1]
            pr = price_european(self.model, self.leverage_, K, [T], M, reprice_seed(cfg.seed), cfg.dt,
                                threads=cfg.threads)
            out[rows] = implied_vol(pr.prices[0], K, T, self.curve_, self.model.spot)
        return out

    def score(self, X, y):
        """Negative max absolute implied-vol error in basis points."""
        err = np.abs(self.predict(X) - np.asarray(y, float))
        return -1e4 * float(np.max(err))
