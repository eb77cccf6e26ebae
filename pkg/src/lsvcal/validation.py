"""Out-of-sample repricing, implied-vol inversion and estimator studies."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ._validation import check_int, check_positive
from .estimators import (
    accumulate_step_stats,
    bandwidth_rule,
    exact_conditional_ratio,
    kernel_conditional_ratio,
    lognormal_conditional_ratio,
)
from .leverage import LeverageSurface
from .market_data import DiscountCurve, VolSurface, black_call
from .models import HybridModel, TimeGrid, conditional_lognormal_params, normal_stream, simulate_drivers
from .particles import ParticleEnsemble

REPORT_MATURITIES = (0.25, 0.5, 1.0, 2.0)
REPORT_MONEYNESS = tuple(np.round(np.linspace(0.8, 1.2, 9), 10))


class ImpliedVolError(ValueError):
    """Price outside the static no-arbitrage bounds."""


def reprice_seed(seed):
    """Seed for out-of-sample repricing, disjoint from the calibration seed's streams."""
    return int(np.random.SeedSequence([int(seed), 0x5EED]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Pricing
# ---------------------------------------------------------------------------


@dataclass
class PriceResult:
    maturities: np.ndarray
    strikes: list
    prices: list
    std_errors: list
    zcb: np.ndarray
    discounted_spot: np.ndarray


def _as_strike_lists(strikes, n_mats):
    if np.ndim(strikes) == 1 or (len(strikes) and np.ndim(strikes[0]) == 0):
        arr = np.asarray(strikes, float)
        return [arr] * n_mats
    if len(strikes) != n_mats:
        raise ValueError("need one strike array per maturity")
    return [np.asarray(k, float) for k in strikes]


def _pair_stats(x, y=None, y_mean=None):
    """Mean and standard error of ``x``, optionally with ``y`` as control variate."""
    M = x.shape[0]
    if y is not None:
        yc = y - y.mean()
        var_y = float(yc @ yc)
        if var_y > 0:
            b = (yc @ (x - x.mean(axis=0))) / var_y
            x = x - np.outer(y - y_mean, b)
    mean = x.mean(axis=0)
    se = x.std(axis=0, ddof=1) / math.sqrt(M)
    return mean, se


def _batch_seed(seed, b):
    return seed if b == 0 else int(np.random.SeedSequence([int(seed), int(b)]).generate_state(1)[0])


def _simulate_terminal(model, leverage, grid, mat_steps, M, seed, antithetic, threads):
    """Spot (and antithetic spot) and discount factor at each maturity step."""
    dt = grid.dt
    knot_steps = {int(round(t / dt)) for t in leverage.times}
    last_knot = max(knot_steps)
    if 0 not in knot_steps:
        raise ValueError("leverage must start at t = 0")
    paths = model.simulate(grid, M, seed=seed, threads=threads)
    ens = ParticleEnsemble(paths, model.spot, antithetic=antithetic)
    events = sorted(set(mat_steps) | {k for k in knot_steps if k < grid.n_steps}
                    | set(range(last_knot, grid.n_steps)) | {0})
    out = {}
    lam = lam_a = None
    for a, b in zip(events, events[1:] + [None]):
        if a in knot_steps or a >= last_knot:
            j = leverage.slice_index(a * dt)
            lam = leverage.evaluate_slice(j, ens.S)
            lam_a = leverage.evaluate_slice(j, np.exp(ens.log_s_anti)) if antithetic else None
        if a in mat_steps:
            out[a] = (ens.S.copy(), np.exp(ens.log_s_anti) if antithetic else None, ens.D.copy())
        if b is None:
            break
        ens.advance(lam, b - a, lam_a)
    return out


def price_european(model: HybridModel, leverage: LeverageSurface, strikes, maturities, n_particles, seed, dt,
                   threads=1, antithetic=True, control_variate=True, batch_size=50_000) -> PriceResult:
    """Discounted call prices ``E[D_T (S_T - K)^+]`` with Monte Carlo standard errors.

    Antithetic pairs flip the spot's own noise. The control variate is
    ``D_T S_T``, whose mean is the spot. ``strikes`` is one array for all
    maturities or a list with one array per maturity. Paths are simulated in
    batches of ``batch_size`` with batch-specific seeds to bound memory.
    """
    M = check_int(n_particles, "n_particles", 2)
    check_int(batch_size, "batch_size", 2)
    mats = np.atleast_1d(np.asarray(maturities, float))
    check_positive(mats, "maturities")
    K_list = _as_strike_lists(strikes, mats.size)
    grid = TimeGrid.covering(float(mats.max()), dt)
    mat_steps = [grid.index(T) for T in mats]
    pay = [[] for _ in mats]
    ds = [[] for _ in mats]
    disc = [[] for _ in mats]
    sizes = [batch_size] * (M // batch_size) + ([M % batch_size] if M % batch_size else [])
    for b, m in enumerate(sizes):
        term = _simulate_terminal(model, leverage, grid, mat_steps, m, _batch_seed(seed, b), antithetic, threads)
        for n, k in enumerate(mat_steps):
            S, Sa, D = term[k]
            K = K_list[n]
            p = D[:, None] * np.maximum(S[:, None] - K[None, :], 0.0)
            x = D * S
            if antithetic:
                p = 0.5 * (p + D[:, None] * np.maximum(Sa[:, None] - K[None, :], 0.0))
                x = 0.5 * (x + D * Sa)
            pay[n].append(p)
            ds[n].append(x)
            disc[n].append(D)
    prices, ses = [], []
    zcb = np.empty(mats.size)
    dspot = np.empty(mats.size)
    for n in range(mats.size):
        p = np.concatenate(pay[n])
        x = np.concatenate(ds[n])
        mean, se = _pair_stats(p, x, model.spot) if control_variate else _pair_stats(p)
        prices.append(mean)
        ses.append(se)
        zcb[n] = np.concatenate(disc[n]).mean()
        dspot[n] = x.mean()
    return PriceResult(mats, K_list, prices, ses, zcb, dspot)


# ---------------------------------------------------------------------------
# Implied volatility
# ---------------------------------------------------------------------------


def _implied_vol_scalar(price, fwd, K, T, df, tol):
    intrinsic = df * max(fwd - K, 0.0)
    upper = df * fwd
    if not (intrinsic < price < upper):
        raise ImpliedVolError(
            f"price {price:.6g} outside ({intrinsic:.6g}, {upper:.6g}) at K={K:g}, T={T:g}"
        )
    sqrt_t = math.sqrt(T)

    def f(s):
        return float(black_call(fwd, K, s * s * T, df)) - price

    lo, hi = 1e-8, 1.0
    while f(hi) < 0:
        hi *= 2.0
        if hi > 1e4:
            raise ImpliedVolError(f"no implied vol below {hi:g}")
    s = 0.5 * (lo + hi)
    for _ in range(200):
        g = f(s)
        if g > 0:
            hi = s
        else:
            lo = s
        if hi - lo < tol:
            break
        d1 = math.log(fwd / K) / (s * sqrt_t) + 0.5 * s * sqrt_t
        vega = df * fwd * sqrt_t * math.exp(-0.5 * d1 * d1) / math.sqrt(2 * math.pi)
        step = s - g / vega if vega > 0 else math.nan
        # Newton step when it stays inside the bracket, bisection otherwise
        s_new = step if lo < step < hi else 0.5 * (lo + hi)
        if abs(s_new - s) < 0.1 * tol:
            s = s_new
            break
        s = s_new
    return s


def implied_vol(price, K, T, curve: DiscountCurve, spot, tol=1e-12):
    """Black implied volatility of discounted call prices; vectorised over ``K``."""
    T = float(T)
    df = float(curve.zcb(T))
    fwd = spot / df
    p = np.atleast_1d(np.asarray(price, float))
    Ks = np.broadcast_to(np.atleast_1d(np.asarray(K, float)), p.shape)
    out = np.array([_implied_vol_scalar(float(x), fwd, float(k), T, df, tol) for x, k in zip(p, Ks)])
    return out if np.ndim(price) or np.ndim(K) else float(out[0])


def implied_vol_bisection(price, K, T, curve: DiscountCurve, spot, tol=1e-13):
    """Pure bisection inversion, kept as an independent check of :func:`implied_vol`."""
    df = float(curve.zcb(T))
    fwd = spot / df
    lo, hi = 1e-8, 10.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if float(black_call(fwd, K, mid * mid * T, df)) > price:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Repricing report
# ---------------------------------------------------------------------------


@dataclass
class RepriceReport:
    T: np.ndarray
    K: np.ndarray
    moneyness: np.ndarray
    target_iv: np.ndarray
    model_iv: np.ndarray
    err_bps: np.ndarray
    se_bps: np.ndarray

    COLUMNS = ("T", "K", "target_iv", "model_iv", "err_bps", "se_bps")

    def band(self, lo=0.8, hi=1.2, maturities=REPORT_MATURITIES):
        m = (self.moneyness >= lo - 1e-12) & (self.moneyness <= hi + 1e-12)
        return m & np.isin(np.round(self.T, 10), np.round(maturities, 10))

    def summary(self, lo=0.8, hi=1.2, maturities=REPORT_MATURITIES):
        mask = self.band(lo, hi, maturities)
        e = np.abs(self.err_bps[mask])
        if e.size == 0:
            return {"max_abs_bps": math.nan, "mean_abs_bps": math.nan, "n": 0}
        return {
            "max_abs_bps": float(np.max(e)),
            "mean_abs_bps": float(np.mean(e)),
            "max_se_bps": float(np.max(self.se_bps[mask])),
            "n": int(e.size),
        }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in zip(self.T, self.K, self.target_iv, self.model_iv, self.err_bps, self.se_bps):
                w.writerow([repr(float(x)) for x in row])

    def smile(self, T):
        m = np.isclose(self.T, T)
        return self.K[m], self.target_iv[m], self.model_iv[m], self.se_bps[m]


def report_strikes(surface: VolSurface, curve: DiscountCurve, maturities=REPORT_MATURITIES,
                   moneyness=REPORT_MONEYNESS):
    return [float(curve.forward(surface.spot, T)) * np.asarray(moneyness, float) for T in maturities]


def reprice_report(model: HybridModel, leverage: LeverageSurface, surface: VolSurface, curve: DiscountCurve,
                   n_particles, seed, dt, maturities=REPORT_MATURITIES, moneyness=REPORT_MONEYNESS, threads=1,
                   control_variate=True) -> RepriceReport:
    """Reprice a moneyness grid and compare model implied vols with the target surface."""
    mats = np.asarray(maturities, float)
    K_list = report_strikes(surface, curve, mats, moneyness)
    pr = price_european(model, leverage, K_list, mats, n_particles, seed, dt, threads=threads,
                        control_variate=control_variate)
    rows = []
    for n, T in enumerate(mats):
        K = K_list[n]
        df = float(curve.zcb(T))
        fwd = model.spot / df
        tgt = np.asarray(surface.implied_vol(K, T), float)
        iv = np.empty(K.size)
        se = np.empty(K.size)
        for j, k in enumerate(K):
            try:
                iv[j] = implied_vol(float(pr.prices[n][j]), float(k), T, curve, model.spot)
            except ImpliedVolError:
                iv[j] = math.nan
            s = iv[j] if np.isfinite(iv[j]) else tgt[j]
            d1 = math.log(fwd / k) / (s * math.sqrt(T)) + 0.5 * s * math.sqrt(T)
            vega = df * fwd * math.sqrt(T) * math.exp(-0.5 * d1 * d1) / math.sqrt(2 * math.pi)
            se[j] = pr.std_errors[n][j] / vega
        for j in range(K.size):
            rows.append((T, K[j], K[j] / fwd, tgt[j], iv[j], 1e4 * (iv[j] - tgt[j]), 1e4 * se[j]))
    arr = np.array(rows, float)
    return RepriceReport(*(arr[:, c] for c in range(7)))


# ---------------------------------------------------------------------------
# Estimator variance study
# ---------------------------------------------------------------------------


@dataclass
class VarianceStudy:
    strikes: np.ndarray
    methods: tuple
    estimates: dict
    variance: dict

    def ratio(self, method, reference="kernel"):
        return self.variance[method] / self.variance[reference]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["K", "method", "variance"])
            for j, k in enumerate(self.strikes):
                for m in self.methods:
                    w.writerow([repr(float(k)), m, repr(float(self.variance[m][j]))])


def estimator_variance_study(model: HybridModel, t, strikes, replications=30, n_particles=20_000, seed=0,
                             dt=1.0 / 252, leverage=1.0, bandwidth=None, kernel_kappa=1.5, methods=None,
                             interval=1, threads=1) -> VarianceStudy:
    """Sample variance of each ratio estimator over independent seeds.

    Particles are diffused to ``t`` with a constant leverage; all estimators
    are then evaluated on the same ensemble in every replication. The exact
    estimator conditions on the spot driver up to ``interval`` simulation
    steps before ``t``; the lognormal one needs ``interval = 1``.
    """
    R = check_int(replications, "replications", 30)
    K = np.asarray(strikes, float)
    grid = TimeGrid.covering(t, dt)
    n = grid.n_steps
    check_int(interval, "interval", 1)
    if interval > n:
        raise ValueError("interval longer than the horizon")
    if methods is None:
        lognormal_ok = getattr(model, "lognormal", False) and interval == 1
        methods = ("exact", "lognormal", "kernel") if lognormal_ok else ("exact", "kernel")
    if "lognormal" in methods and interval != 1:
        raise ValueError("the lognormal estimator needs interval = 1")
    est = {m: np.empty((R, K.size)) for m in methods}
    lam_const = float(leverage)
    for r in range(R):
        paths = model.simulate(grid, n_particles, seed=seed + r, lognormal="lognormal" in methods, threads=threads)
        ens = ParticleEnsemble(paths, model.spot)
        lam = np.full(n_particles, lam_const)
        if n > interval:
            ens.advance(lam, n - interval)
        params = ens.advance(lam, interval)
        D, V = ens.D, ens.V
        for m in methods:
            if m == "exact":
                e = exact_conditional_ratio(params, D, V, K, strict=False)
            elif m == "lognormal":
                clp = conditional_lognormal_params(model, n - 1, paths)
                e = lognormal_conditional_ratio(clp, params, D, K, strict=False)
            elif m == "kernel":
                vol = lam_const * math.sqrt(model.v0)
                h = bandwidth if bandwidth is not None else bandwidth_rule(n_particles, t, vol, model.spot, kernel_kappa)
                e = kernel_conditional_ratio(ens.S, V, D, K, h, strict=False)
            else:
                raise ValueError(f"unknown method {m!r}")
            est[m][r] = e.value
    var = {m: est[m].var(axis=0, ddof=1) for m in methods}
    return VarianceStudy(K, tuple(methods), est, var)


# ---------------------------------------------------------------------------
# Conditional law moment check
# ---------------------------------------------------------------------------


@dataclass
class MomentReport:
    predicted_mean: float
    predicted_var: float
    sample_mean: float
    sample_var: float
    sample_skew: float
    z_mean: float
    z_var: float
    z_skew: float
    n_draws: int

    @property
    def passed(self):
        return all(abs(z) <= 3.0 for z in (self.z_mean, self.z_var, self.z_skew))


def _gaussian_conditioning(full_cov, dZ, dt):
    """Mean and standard deviation of ``dW`` given ``dZ`` from the joint covariance."""
    s_wz = full_cov[0, 1:]
    s_zz = full_cov[1:, 1:]
    coef, *_ = np.linalg.lstsq(s_zz, s_wz, rcond=1e-12)
    var = max(full_cov[0, 0] - s_wz @ coef, 0.0)
    return dZ @ coef, math.sqrt(var * dt)


def conditional_law_moment_check(model: HybridModel, grid: TimeGrid, step, n_steps=1, lam=1.0, particle=0,
                          n_inner=20_000, seed=0, inner_seed=1) -> MomentReport:
    """Compare the predicted conditional law of ``log S`` with brute-force inner draws.

    The outer path (variance, rates, the ``Z`` drivers and the spot history
    up to ``step``) is frozen. The spot increments over
    ``[step, step + n_steps)`` are redrawn ``n_inner`` times from the Gaussian
    law of ``dW`` given ``dZ``, computed directly from the joint correlation
    matrix, and Euler-stepped with the leverage frozen at the interval start.
    """
    n_outer = particle + 1
    paths = model.simulate(grid, n_outer, seed=seed)
    drivers = simulate_drivers(model.correlation, grid, n_outer, seed=seed)
    ens = ParticleEnsemble(paths, model.spot)
    lam_fn = lam if callable(lam) else (lambda S, _c=float(lam): np.full_like(S, _c))
    if step > 0:
        ens.advance(lam_fn(ens.S), step)
    log_s0 = float(ens.log_s[particle])
    lam0 = float(lam_fn(ens.S)[particle])
    k0, k1 = step, step + n_steps
    p = paths
    V = p.V[particle, k0:k1]
    r = p.r[particle, k0:k1]
    predicted = accumulate_step_stats(
        np.array([log_s0]), np.array([lam0]), V[None, :], r[None, :], p.dw_par[particle, k0:k1][None, :],
        grid.dt, p.rho_hat2,
    )
    mu = float(predicted.mu[0])
    var = float(predicted.cond_std[0] ** 2)

    m, sd = _gaussian_conditioning(model.correlation.full, drivers.dZ[particle, k0:k1], grid.dt)
    log_s = np.full(n_inner, log_s0)
    for n in range(n_steps):
        eps = normal_stream(inner_seed, 0, k0 + n, 0, n_inner)
        dW = m[n] + sd * eps
        log_s += (r[n] - 0.5 * lam0 * lam0 * V[n]) * grid.dt + lam0 * math.sqrt(V[n]) * dW
    smean = float(log_s.mean())
    svar = float(log_s.var(ddof=1))
    N = n_inner
    if svar == 0.0:
        zm = 0.0 if abs(smean - mu) <= 1e-12 * max(1.0, abs(mu)) else math.inf
        zv = 0.0 if var <= 1e-24 else math.inf
        return MomentReport(mu, var, smean, svar, 0.0, zm, zv, 0.0, N)
    skew = float(stats.skew(log_s))
    m4 = float(np.mean((log_s - smean) ** 4))
    se_var = math.sqrt(max(m4 - svar * svar, 0.0) / N)
    z_mean = (smean - mu) / math.sqrt(svar / N)
    z_var = (svar - var) / se_var if se_var > 0 else 0.0
    z_skew = skew / math.sqrt(6.0 / N)
    return MomentReport(mu, var, smean, svar, skew, z_mean, z_var, z_skew, N)


__all__ = [
    "ImpliedVolError",
    "MomentReport",
    "PriceResult",
    "RepriceReport",
    "VarianceStudy",
    "estimator_variance_study",
    "implied_vol",
    "implied_vol_bisection",
    "price_european",
    "reprice_report",
    "reprice_seed",
    "conditional_law_moment_check",
]
