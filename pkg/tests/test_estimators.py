import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from lsvcal.estimators import (
    ConditionalLawParams,
    EstimatorError,
    accumulate_step_stats,
    bandwidth_rule,
    exact_conditional_ratio,
    indicator_rate_term,
    kernel_conditional_ratio,
    lognormal_conditional_ratio,
    prune_particles,
    quartic_kernel,
    rate_adjustment_term,
    rate_term_branches,
)
from lsvcal.models import ConditionalLognormalParams, conditional_lognormal_params, RoughBergomiVasicek, RoughVolParams, TimeGrid, VasicekParams
from lsvcal.particles import ParticleEnsemble


def _ensemble(M, seed=0, rho_hat2=0.5, spread=0.05):
    rng = np.random.default_rng(seed)
    mu = math.log(100) + spread * rng.standard_normal(M)
    sigma2 = 0.04 / 52 * np.exp(0.3 * rng.standard_normal(M))
    D = np.exp(-0.01 * rng.random(M))
    V = 0.04 * np.exp(0.5 * rng.standard_normal(M))
    r = 0.015 + 0.005 * rng.standard_normal(M)
    params = ConditionalLawParams(mu, sigma2, rho_hat2, mu - 0.01 * rng.standard_normal(M), 1)
    return params, D, V, r


# -- step statistics ---------------------------------------------------------


def test_black_scholes_step_stats():
    M, n, dt = 4, 5, 0.01
    log_s = np.log(np.full(M, 100.0))
    p = accumulate_step_stats(log_s, np.full(M, 2.0), np.full((M, n), 0.04), np.full((M, n), 0.03), np.zeros((M, n)), dt, 0.0)
    assert np.allclose(p.sigma2, 4 * 0.04 * n * dt, rtol=1e-14)
    assert np.allclose(p.mu, log_s + 0.03 * n * dt - 0.5 * 4 * 0.04 * n * dt, rtol=1e-14)
    assert np.array_equal(p.mu, p.mu_tilde)


def test_substep_statistics_are_additive():
    rng = np.random.default_rng(1)
    M, n, dt = 50, 6, 1 / 252
    V = 0.04 * np.exp(rng.standard_normal((M, n)))
    r = 0.02 + 0.01 * rng.standard_normal((M, n))
    dwp = math.sqrt(dt) * rng.standard_normal((M, n))
    lam = 0.5 + rng.random(M)
    log_s = np.log(100.0) + 0.1 * rng.standard_normal(M)
    whole = accumulate_step_stats(log_s, lam, V, r, dwp, dt, 0.3)
    first = accumulate_step_stats(log_s, lam, V[:, :2], r[:, :2], dwp[:, :2], dt, 0.3)
    second = accumulate_step_stats(first.mu, lam, V[:, 2:], r[:, 2:], dwp[:, 2:], dt, 0.3)
    assert np.allclose(whole.sigma2, first.sigma2 + second.sigma2, rtol=1e-13)
    assert np.allclose(whole.mu, second.mu, rtol=1e-13)
    assert whole.substeps == n


# -- exact estimator ---------------------------------------------------------


def test_single_particle_returns_its_variance():
    p = ConditionalLawParams(np.array([4.6]), np.array([0.001]), 0.2)
    est = exact_conditional_ratio(p, np.array([0.97]), np.array([0.0731]), 100.0)
    assert est.value == pytest.approx(0.0731, rel=1e-15)


def test_constant_variance_returns_constant():
    params, D, _, _ = _ensemble(2000)
    est = exact_conditional_ratio(params, D, np.full(2000, 0.05), np.array([90.0, 100.0, 110.0]))
    assert np.allclose(est.value, 0.05, rtol=1e-14)


def test_exact_matches_direct_weighting():
    params, D, V, _ = _ensemble(500, seed=2)
    K = np.array([95.0, 100.0, 104.0])
    est = exact_conditional_ratio(params, D, V, K, d_max=np.inf)
    sd = np.sqrt((1 - params.rho_hat2) * params.sigma2)
    dens = np.exp(-0.5 * ((np.log(K)[None] - params.mu[:, None]) / sd[:, None]) ** 2) / sd[:, None]
    oracle = (D[:, None] * V[:, None] * dens).sum(0) / (D[:, None] * dens).sum(0)
    assert np.allclose(est.value, oracle, rtol=1e-12)


def test_pruning_is_negligible():
    params, D, V, _ = _ensemble(20_000, seed=3, spread=0.2)
    K = np.linspace(70, 140, 15)
    full = exact_conditional_ratio(params, D, V, K, d_max=np.inf)
    pruned = exact_conditional_ratio(params, D, V, K, d_max=10)
    assert np.max(np.abs(pruned.value / full.value - 1)) < 1e-10


def test_permutation_invariance_is_bitwise():
    params, D, V, _ = _ensemble(5000, seed=4)
    perm = np.random.default_rng(0).permutation(5000)
    pp = ConditionalLawParams(params.mu[perm], params.sigma2[perm], params.rho_hat2)
    K = np.array([97.0, 100.0, 103.0])
    a = exact_conditional_ratio(params, D, V, K)
    b = exact_conditional_ratio(pp, D[perm], V[perm], K)
    assert np.array_equal(a.value, b.value)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.floats(80, 125), d_max=st.floats(0.5, 10))
def test_window_equals_brute_force(seed, K, d_max):
    params, _, _, _ = _ensemble(3000, seed=seed)
    got = prune_particles(params, K, d_max)
    brute = np.flatnonzero(np.abs(params.d(K)[:, 0]) <= d_max)
    assert np.array_equal(got, brute)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.floats(90, 110))
def test_ratio_is_convex_combination(seed, K):
    params, D, V, _ = _ensemble(500, seed=seed)
    v = exact_conditional_ratio(params, D, V, K).value
    assert V.min() * (1 - 1e-12) <= v <= V.max() * (1 + 1e-12)


def test_no_mass_raises_or_reports():
    params, D, V, _ = _ensemble(100, spread=0.001)
    with pytest.raises(EstimatorError):
        exact_conditional_ratio(params, D, V, 1000.0)
    est = exact_conditional_ratio(params, D, V, np.array([100.0, 1000.0]), strict=False)
    assert np.isfinite(est.value[0]) and np.isnan(est.value[1])
    assert est.effective_sample_size[1] == 0


def test_degenerate_conditioning_rejected():
    params, D, V, _ = _ensemble(10, rho_hat2=1.0)
    with pytest.raises(EstimatorError):
        exact_conditional_ratio(params, D, V, 100.0)


# -- lognormal closed form ---------------------------------------------------


def _clp(M, rho, seed=5):
    rng = np.random.default_rng(seed)
    xi = math.log(0.04) + 0.2 * rng.standard_normal(M)
    return ConditionalLognormalParams(xi, 0.05, rho, math.log(0.04), 0.4)


def test_lognormal_factorizes_without_correlation():
    params, D, _, _ = _ensemble(300, seed=6)
    clp = _clp(300, 0.0)
    K = np.array([96.0, 101.0])
    est = lognormal_conditional_ratio(clp, params, D, K)
    sd = np.sqrt(params.sigma2)
    w = D[:, None] / sd[:, None] * np.exp(-0.5 * ((np.log(K)[None] - params.mu_tilde[:, None]) / sd[:, None]) ** 2)
    ev = np.exp(clp.xi_tilde + 0.5 * clp.nu_tilde)
    assert np.allclose(est.value, (w * ev[:, None]).sum(0) / w.sum(0), rtol=1e-13)


def test_lognormal_matches_gauss_hermite():
    """Per-particle conditional mean of V given log S integrated by 60-point Gauss-Hermite."""
    params, D, _, _ = _ensemble(20, seed=7)
    rho = -0.7
    clp = _clp(20, rho, seed=8)
    y, wq = np.polynomial.hermite_e.hermegauss(60)
    wq = wq / math.sqrt(2 * math.pi)
    nu = clp.nu_tilde
    for K in (94.0, 100.0, 107.0):
        sd = np.sqrt(params.sigma2)
        z = (math.log(K) - params.mu_tilde) / sd
        dens = D / sd * np.exp(-0.5 * z * z)
        cm = clp.xi_tilde + rho * math.sqrt(nu) * z
        cs = math.sqrt((1 - rho * rho) * nu)
        ev = np.array([np.sum(wq * np.exp(m + cs * y)) for m in cm])
        oracle = np.sum(dens * ev) / np.sum(dens)
        assert lognormal_conditional_ratio(clp, params, D, K).value == pytest.approx(oracle, rel=1e-8)


def test_lognormal_needs_single_substep():
    params, D, _, _ = _ensemble(10)
    params.substeps = 3
    with pytest.raises(EstimatorError):
        lognormal_conditional_ratio(_clp(10, 0.1), params, D, 100.0)


def test_exact_and_lognormal_agree_on_brownian_kernel():
    model = RoughBergomiVasicek(rough=RoughVolParams(H=0.5, beta=0.0, nu=1.0), rates=VasicekParams(sigma=0.0), rho_wz=-0.6)
    grid = TimeGrid(1 / 52, 13)
    M = 40_000
    paths = model.simulate(grid, M, seed=11, lognormal=True)
    ens = ParticleEnsemble(paths, 100.0)
    ens.advance(np.ones(M), grid.n_steps - 1)
    params = ens.advance(np.ones(M), 1)
    model_clp = conditional_lognormal_params(model, grid.n_steps - 1, paths)
    K = np.array([95.0, 100.0, 105.0])
    a = exact_conditional_ratio(params, ens.D, ens.V, K).value
    b = lognormal_conditional_ratio(model_clp, params, ens.D, K).value
    assert np.max(np.abs(a / b - 1)) < 0.03


# -- kernel ------------------------------------------------------------------


def test_quartic_kernel_normalization():
    h = 2.5
    assert quartic_kernel(0.0, h) == pytest.approx(15 / 16 / h)
    assert quartic_kernel(h * 1.0001, h) == 0.0
    val, _ = integrate.quad(lambda x: float(quartic_kernel(x, h)), -h, h)
    assert val == pytest.approx(1.0, abs=1e-12)


def test_kernel_coincident_points():
    S = np.full(4, 100.0)
    D = np.array([1.0, 0.5, 0.25, 0.25])
    V = np.array([0.01, 0.02, 0.03, 0.05])
    est = kernel_conditional_ratio(S, V, D, 100.0, 1.0)
    assert est.value == pytest.approx(np.dot(D, V) / D.sum(), rel=1e-15)


def test_kernel_outside_support_raises():
    with pytest.raises(EstimatorError):
        kernel_conditional_ratio(np.array([100.0]), np.array([0.04]), np.array([1.0]), 110.0, 1.0)


def test_bandwidth_rule():
    h = bandwidth_rule(50_000, 1.0, 0.2, 100.0)
    assert h == pytest.approx(1.5 * 0.2 * 100 * 50_000 ** -0.2, rel=1e-14)
    assert h == pytest.approx(3.44, abs=0.01)
    assert bandwidth_rule(32 * 1000, 0.5, 0.2, 100) == pytest.approx(bandwidth_rule(1000, 0.5, 0.2, 100) / 2, rel=1e-14)
    assert bandwidth_rule(1000, 0.0, 0.2, 100) == pytest.approx(0.01)


# -- rate adjustment ---------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), rbar=st.floats(-0.02, 0.05))
def test_rate_branches_differ_by_sample_mean(seed, rbar):
    params, D, _, r = _ensemble(400, seed=seed)
    K = np.array([80.0, 100.0, 120.0])
    above, below = rate_term_branches(params, D, r, K, rbar)
    assert np.allclose(above - below, np.mean(D * (r - rbar)), rtol=0, atol=1e-16)


def test_deterministic_rates_give_zero_adjustment():
    params, D, _, _ = _ensemble(100)
    r = np.full(100, 0.02)
    K = np.array([90.0, 110.0])
    assert np.all(rate_adjustment_term(params, D, r, K, 0.02, 100.0) == 0)
    assert np.all(indicator_rate_term(np.exp(params.mu), D, r, K, 0.02) == 0)


def test_rate_adjustment_agrees_with_indicator():
    rng = np.random.default_rng(3)
    M = 200_000
    params, D, _, r = _ensemble(M, seed=9, rho_hat2=0.3)
    # r is measurable w.r.t. the conditioning; S draws only its own noise
    r = 0.015 + 0.2 * (params.mu - math.log(100))
    S = np.exp(params.mu + params.cond_std * rng.standard_normal(M))
    K = np.array([95.0, 100.0, 105.0])
    a = rate_adjustment_term(params, D, r, K, 0.015, 100.0)
    b = indicator_rate_term(S, D, r, K, 0.015)
    se = np.std(D * (r - 0.015)) / math.sqrt(M)
    assert np.all(np.abs(a - b) < 4 * se)
