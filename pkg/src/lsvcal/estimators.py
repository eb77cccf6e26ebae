"""Monte Carlo estimators of ``E[D V | S = K] / E[D | S = K]`` and of the rate
adjustment ``E[D (r - rbar) 1{S > K}]``.

Three interchangeable ratio estimators are provided:

* ``exact_conditional_ratio``: Gaussian weights from the law of ``log S_{t_i}``
  given the spot driver up to ``t_{i-1}`` and the variance/rate drivers up to
  ``t_i``;
* ``lognormal_conditional_ratio``: closed form for lognormal variance, which
  integrates ``V_{t_i}`` out against the bivariate normal of
  ``(log S, log V)`` given the past at ``t_{i-1}``;
* ``kernel_conditional_ratio``: Nadaraya-Watson regression with a quartic kernel.

Weights drop the common factors ``sqrt(2 pi)``, ``sqrt(1 - rho_hat^2)`` and
``1/K`` of the conditional density; they are not densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

DEFAULT_D_MAX = 8.0
RATE_PRUNE = 1e-14


class EstimatorError(ValueError):
    """Raised when no particle carries mass at the requested strike."""


@dataclass
class ConditionalLawParams:
    """Per-particle moments of ``log S_{t_i}``.

    ``mu`` and ``sigma2`` describe the law given the spot driver up to
    ``t_{i-1}`` and the ``Z`` drivers up to ``t_i``: ``N(mu, (1 - rho_hat2) sigma2)``.
    ``mu_tilde`` drops the ``W_par`` term and is the mean given the past at
    ``t_{i-1}`` only (variance ``sigma2``).
    """

    mu: np.ndarray
    sigma2: np.ndarray
    rho_hat2: float
    mu_tilde: np.ndarray | None = None
    substeps: int = 1

    @property
    def cond_std(self):
        return np.sqrt((1.0 - self.rho_hat2) * self.sigma2)

    def d(self, K):
        """``d_i(K) = (mu - log K) / sqrt((1 - rho_hat2) sigma2)``, shape ``(particles, strikes)``."""
        logk = np.log(np.atleast_1d(np.asarray(K, float)))
        num = self.mu[:, None] - logk[None, :]
        sd = self.cond_std[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = num / sd
        return np.where(sd > 0, out, np.sign(num) * np.inf)

    def d_tilde(self, K):
        logk = np.log(np.atleast_1d(np.asarray(K, float)))
        return (self.mu_tilde[:, None] - logk[None, :]) / np.sqrt(self.sigma2)[:, None]


@dataclass
class WeightedEstimate:
    numerator: np.ndarray
    denominator: np.ndarray
    value: np.ndarray
    effective_sample_size: np.ndarray


def _estimate(num, den, ess_w2, K, strict):
    num = np.asarray(num, float)
    den = np.asarray(den, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        value = num / den
        ess = den * den / ess_w2
    bad = ~(den > 0) | ~np.isfinite(value)
    if strict and np.any(bad):
        k = np.atleast_1d(K)[np.atleast_1d(bad)][0]
        raise EstimatorError(f"no mass at strike K={k:g}")
    value = np.where(bad, np.nan, value)
    ess = np.where(bad, 0.0, ess)
    return WeightedEstimate(num, den, value, ess)


def _squeeze(est, K):
    if np.ndim(K):
        return est
    return WeightedEstimate(
        *(float(np.asarray(x).ravel()[0]) for x in (est.numerator, est.denominator, est.value, est.effective_sample_size))
    )


def accumulate_step_stats(log_s, lam, V, r, dw_par, dt, rho_hat2):
    """Moments of ``log S`` over one calibration interval of ``n`` simulation substeps.

    Parameters
    ----------
    log_s : (M,) log spot at the interval start.
    lam : (M,) leverage frozen at the interval-start spot.
    V, r : (M, n) variance and short rate at the start of each substep.
    dw_par : (M, n) increments of the projection of ``W`` on ``Z``.
    dt : substep length.
    """
    V = np.atleast_2d(np.asarray(V, float).T).T
    r = np.atleast_2d(np.asarray(r, float).T).T
    dw_par = np.atleast_2d(np.asarray(dw_par, float).T).T
    lam2 = np.asarray(lam, float) ** 2
    var_int = V.sum(axis=1) * dt
    sigma2 = lam2 * var_int
    drift = r.sum(axis=1) * dt - 0.5 * sigma2
    par = lam * (np.sqrt(V) * dw_par).sum(axis=1)
    mu_tilde = log_s + drift
    return ConditionalLawParams(mu_tilde + par, sigma2, float(rho_hat2), mu_tilde, V.shape[1])


def _canonical_order(params, *arrays):
    """Permutation sorting particles by ``mu / sigma`` with deterministic tie-breaks."""
    with np.errstate(divide="ignore", invalid="ignore"):
        key = params.mu / np.sqrt(params.sigma2)
    keys = [np.asarray(a, float) for a in reversed(arrays)] + [params.sigma2, key]
    return np.lexsort(keys), key


def _window(key_sorted, logk, d_max, sd_min, sd_max, rho_c):
    """Index range in the sorted key containing every particle with ``|d| <= d_max``."""
    # |mu - logk| <= d_max * rho_c * sd  <=>  mu/sd in logk/sd +- d_max * rho_c
    c = d_max * rho_c
    bounds = (logk / sd_max, logk / sd_min)
    lo = np.searchsorted(key_sorted, min(bounds) - c, side="left")
    hi = np.searchsorted(key_sorted, max(bounds) + c, side="right")
    return lo, hi


def prune_particles(params: ConditionalLawParams, K, d_max=DEFAULT_D_MAX):
    """Indices of particles with ``|d_i(K)| <= d_max``, ascending.

    Candidates come from a contiguous window of the particles sorted by
    ``mu / sqrt(sigma2)``; the exact filter is applied inside the window.
    """
    if not d_max > 0:
        raise ValueError("d_max must be positive")
    M = params.mu.size
    if np.isinf(d_max):
        return np.arange(M)
    order, key = _canonical_order(params)
    sd = np.sqrt(params.sigma2)
    pos = sd > 0
    if not np.any(pos):
        return np.arange(0)
    rho_c = math.sqrt(max(1 - params.rho_hat2, 0.0))
    lo, hi = _window(key[order], math.log(K), d_max, sd[pos].min(), sd[pos].max(), rho_c)
    cand = order[lo:hi]
    d = params.d(K)[cand, 0]
    return np.sort(cand[np.abs(d) <= d_max])


def exact_conditional_ratio(params: ConditionalLawParams, D, V, K, d_max=DEFAULT_D_MAX, strict=True):
    """Conditional-law estimator of ``E[D V | S = K] / E[D | S = K]`` for each strike.

    Particles are summed in the canonical ``mu / sigma`` order, so the result is
    invariant under permutations of the ensemble. Particles with
    ``|d| > d_max`` are skipped.
    """
    D = np.asarray(D, float)
    V = np.asarray(V, float)
    Ks = np.atleast_1d(np.asarray(K, float))
    if params.rho_hat2 >= 1.0:
        raise EstimatorError("degenerate conditioning: rho_hat^2 = 1")
    if np.any(params.sigma2 <= 0):
        raise EstimatorError("zero conditional variance for some particles")
    order, key = _canonical_order(params, D, V)
    ks = key[order]
    mu = params.mu[order]
    sd = np.sqrt((1 - params.rho_hat2) * params.sigma2[order])
    base = D[order] / np.sqrt(params.sigma2[order])
    Vs = V[order]
    sqrt_s2 = np.sqrt(params.sigma2)
    s_min, s_max = sqrt_s2.min(), sqrt_s2.max()
    rho_c = math.sqrt(1 - params.rho_hat2)
    num = np.empty(Ks.size)
    den = np.empty(Ks.size)
    w2 = np.empty(Ks.size)
    for j, k in enumerate(Ks):
        logk = math.log(k)
        if np.isinf(d_max):
            lo, hi = 0, ks.size
        else:
            lo, hi = _window(ks, logk, d_max, s_min, s_max, rho_c)
        d = (mu[lo:hi] - logk) / sd[lo:hi]
        w = base[lo:hi] * np.exp(-0.5 * d * d)
        if not np.isinf(d_max):
            w = np.where(np.abs(d) <= d_max, w, 0.0)
        den[j] = np.sum(w)
        num[j] = np.sum(w * Vs[lo:hi])
        w2[j] = np.sum(w * w)
    est = _estimate(num, den, w2, Ks, strict)
    return _squeeze(est, K)


def lognormal_conditional_ratio(clp, params: ConditionalLawParams, D, K, strict=True):
    """Closed-form ratio when ``log V_{t_i}`` is Gaussian given the past at ``t_{i-1}``.

    ``clp`` carries ``xi_tilde`` (per particle), ``nu_tilde`` and ``rho``.
    Requires the calibration interval to be a single simulation step.
    """
    if params.mu_tilde is None or params.substeps != 1:
        raise EstimatorError("lognormal closed form needs single-substep intervals")
    D = np.asarray(D, float)
    Ks = np.atleast_1d(np.asarray(K, float))
    sd = np.sqrt(params.sigma2)
    if np.any(sd <= 0):
        raise EstimatorError("zero conditional variance for some particles")
    z = (np.log(Ks)[None, :] - params.mu_tilde[:, None]) / sd[:, None]
    nu = float(clp.nu_tilde)
    rho = float(clp.rho)
    base = (D / sd)[:, None]
    den_w = base * np.exp(-0.5 * z * z)
    expo = np.asarray(clp.xi_tilde, float)[:, None] + rho * math.sqrt(nu) * z + 0.5 * (1 - rho * rho) * nu - 0.5 * z * z
    num_w = base * np.exp(expo)
    est = _estimate(num_w.sum(axis=0), den_w.sum(axis=0), (den_w * den_w).sum(axis=0), Ks, strict)
    return _squeeze(est, K)


def quartic_kernel(x, h):
    u = np.asarray(x, float) / h
    return np.where(np.abs(u) <= 1, 15.0 / 16.0 * (1 - u * u) ** 2, 0.0) / h


def kernel_conditional_ratio(S, V, D, K, h, strict=True):
    """Nadaraya-Watson estimate with the quartic kernel of bandwidth ``h``."""
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    S = np.asarray(S, float)
    order = np.lexsort((np.asarray(V, float), np.asarray(D, float), S))
    Ss, Vs, Ds = S[order], np.asarray(V, float)[order], np.asarray(D, float)[order]
    Ks = np.atleast_1d(np.asarray(K, float))
    num = np.empty(Ks.size)
    den = np.empty(Ks.size)
    w2 = np.empty(Ks.size)
    for j, k in enumerate(Ks):
        lo = np.searchsorted(Ss, k - h, side="left")
        hi = np.searchsorted(Ss, k + h, side="right")
        w = Ds[lo:hi] * quartic_kernel(Ss[lo:hi] - k, h)
        den[j] = w.sum()
        num[j] = (w * Vs[lo:hi]).sum()
        w2[j] = (w * w).sum()
    est = _estimate(num, den, w2, Ks, strict)
    return _squeeze(est, K)


def bandwidth_rule(M, t, vol_scale, spot, kappa=1.5):
    """Rule-of-thumb bandwidth ``kappa * vol * spot * sqrt(t) * M^(-1/5)``, floored at ``1e-4 spot``."""
    if M < 2:
        raise ValueError("need at least two particles")
    if t < 0:
        raise ValueError("t must be non-negative")
    h = kappa * vol_scale * spot * math.sqrt(t) * M ** (-0.2)
    return max(h, 1e-4 * spot)


def rate_term_branches(params: ConditionalLawParams, D, r, K, rbar, prune=0.0):
    """Both conditional forms of ``E[D (r - rbar) 1{S > K}]``.

    Returns ``(above, below)`` with ``above = mean(D (r - rbar) Phi(d))`` and
    ``below = -mean(D (r - rbar) Phi(-d))``; they agree in expectation and differ
    by the sample mean of ``D (r - rbar)`` on any ensemble.
    """
    x = np.asarray(D, float) * (np.asarray(r, float) - rbar)
    d = params.d(K)
    p_up = ndtr(d)
    p_dn = ndtr(-d)
    if prune > 0:
        p_up = np.where(p_up < prune, 0.0, p_up)
        p_dn = np.where(p_dn < prune, 0.0, p_dn)
    M = x.size
    above = (x[:, None] * p_up).sum(axis=0) / M
    below = -(x[:, None] * p_dn).sum(axis=0) / M
    return above, below


def rate_adjustment_term(params: ConditionalLawParams, D, r, K, rbar, spot, prune=RATE_PRUNE):
    """Rate adjustment using the branch whose ``Phi`` factor is small for most particles:
    ``Phi(d)`` above the spot and ``Phi(-d)`` at or below it."""
    Ks = np.atleast_1d(np.asarray(K, float))
    above, below = rate_term_branches(params, D, r, Ks, rbar, prune)
    out = np.where(Ks > spot, above, below)
    return out if np.ndim(K) else float(out[0])


def indicator_rate_term(S, D, r, K, rbar):
    """Plain Monte Carlo ``mean(D (r - rbar) 1{S > K})``."""
    x = np.asarray(D, float) * (np.asarray(r, float) - rbar)
    Ks = np.atleast_1d(np.asarray(K, float))
    out = ((np.asarray(S, float)[:, None] > Ks[None, :]) * x[:, None]).mean(axis=0)
    return out if np.ndim(K) else float(out[0])
