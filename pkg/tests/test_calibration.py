import math

import numpy as np
import pytest
from sklearn.base import clone

from lsvcal.calibration import (
    CalibrationConfig,
    CalibrationError,
    LSVCalibrator,
    initialize_leverage,
    knot_strikes,
    run_calibration,
)
from lsvcal.estimators import ConditionalLawParams, exact_conditional_ratio
from lsvcal.leverage import LeverageSurface
from lsvcal.market_data import synthesize_surface
from lsvcal.models import Bergomi2FVasicek, ForwardVariance, RoughBergomiVasicek, RoughVolParams, VasicekParams

from .conftest import vasicek_curve

WEEK = 1 / 52


def _fast(**kw):
    base = dict(n_particles=2000, dt=WEEK, horizon=0.5, n_strikes=9, seed=3)
    base.update(kw)
    return CalibrationConfig(**base)


@pytest.fixture
def bs_world(flat_spec):
    rates = VasicekParams(kappa=1.0, sigma=0.0, r0=0.02, r_init=0.02)
    curve = vasicek_curve(rates)
    model = RoughBergomiVasicek(rough=RoughVolParams(nu=0.0, xi0=ForwardVariance.flat(0.09)), rates=rates)
    return model, synthesize_surface(flat_spec, curve), curve


def test_initial_leverage():
    assert np.allclose(initialize_leverage([0.2, 0.2], 0.04), 1.0)
    assert np.allclose(initialize_leverage([0.13, 0.31], 1.0), [0.13, 0.31])
    with pytest.raises(CalibrationError):
        initialize_leverage([0.2, 0.0], 0.04)


def test_config_validation():
    with pytest.raises(ValueError):
        CalibrationConfig(n_particles=10)
    with pytest.raises(ValueError):
        CalibrationConfig(estimator="splines")
    cfg = CalibrationConfig(dt=0.1, horizon=1.05, knot_stride=4)
    assert cfg.grid.n_steps % 4 == 0 and cfg.grid.horizon >= 1.05
    assert cfg.knot_steps[0] == 0 and np.all(np.diff(cfg.knot_steps) == 4)


def test_strike_nodes_bracket_forward(skew_surface, curve):
    cfg = CalibrationConfig(n_strikes=11)
    K = knot_strikes(cfg, skew_surface, curve, 1.0)
    fwd = curve.forward(skew_surface.spot, 1.0)
    assert K.size == 11 and np.all(np.diff(K) > 0)
    assert K[0] < fwd < K[-1]
    assert K[5] == pytest.approx(fwd, rel=1e-12)
    assert K[0] >= 0.5 * fwd * (1 - 1e-12) and K[-1] <= 2.0 * fwd * (1 + 1e-12)


def test_two_particle_hand_fixture():
    # symmetric placement gives equal Gaussian weights, so the ratio is the D-weighted mean of V
    K = 100.0
    p = ConditionalLawParams(np.log(K) + np.array([-0.01, 0.01]), np.full(2, 0.001), 0.5)
    D, V = np.array([0.99, 0.95]), np.array([0.03, 0.06])
    got = exact_conditional_ratio(p, D, V, K).value
    assert got == pytest.approx((0.99 * 0.03 + 0.95 * 0.06) / 1.94, rel=1e-14)
    # the corrector: sigma_dup = 0.2, no rate term
    lam = math.sqrt(0.04 / got)
    assert lam == pytest.approx(math.sqrt(0.04 * 1.94 / (0.99 * 0.03 + 0.95 * 0.06)), rel=1e-14)


def test_black_scholes_world_recovers_constant_leverage(bs_world):
    model, surface, curve = bs_world
    res = run_calibration(_fast(horizon=1.0), model, surface, curve)
    for v in res.leverage.values:
        # sigma / sqrt(V) = 0.2 / 0.3; constant V leaves no Monte Carlo error
        assert np.allclose(v, 2 / 3, rtol=1e-7)
    assert all(np.all(s.rate_term == 0) for s in res.slices)
    assert res.diagnostics["converged"] and not res.diagnostics["floored_nodes"]


def test_smoke_run_is_positive_and_reproducible(rough_model, skew_surface, curve):
    cfg = _fast(n_particles=1000, horizon=1.0)
    a = run_calibration(cfg, rough_model, skew_surface, curve, threads=1)
    b = run_calibration(cfg, rough_model, skew_surface, curve, threads=3)
    assert len(a.leverage) == len(cfg.knot_steps)
    for va, vb in zip(a.leverage.values, b.leverage.values):
        assert np.all(va > 0) and np.all(np.isfinite(va))
        assert np.array_equal(va, vb)
    assert a.diagnostics["floored_nodes"] == b.diagnostics["floored_nodes"]


@pytest.mark.parametrize("estimator", ["exact", "kernel"])
def test_stochastic_rates_produce_rate_term(estimator, rough_model, skew_surface, curve):
    res = run_calibration(_fast(estimator=estimator), rough_model, skew_surface, curve)
    assert any(np.any(s.rate_term != 0) for s in res.slices)


def test_lognormal_estimator_runs_on_rough_model(rough_model, skew_surface, curve):
    res = run_calibration(_fast(estimator="lognormal", horizon=0.25), rough_model, skew_surface, curve)
    assert res.diagnostics["converged"]


class _NonLognormal(Bergomi2FVasicek):
    lognormal = False


def test_lognormal_estimator_needs_lognormal_model(skew_surface, curve):
    with pytest.raises(ValueError):
        run_calibration(_fast(estimator="lognormal"), _NonLognormal(), skew_surface, curve)
    with pytest.raises(ValueError):
        run_calibration(_fast(estimator="lognormal", knot_stride=2), RoughBergomiVasicek(), skew_surface, curve)


def test_excess_flooring_aborts_with_diagnostics(rough_model, skew_surface, curve):
    with pytest.raises(CalibrationError) as info:
        run_calibration(_fast(floor_fraction=1.0, max_floored_fraction=0.0), rough_model, skew_surface, curve)
    err = info.value
    assert err.slice_index == 1
    assert err.diagnostics["abort"]["slice"] == 1
    assert not err.diagnostics["converged"]
    assert len(err.leverage) == 2


def test_leverage_csv_round_trip(tmp_path, rough_model, skew_surface, curve):
    lev = run_calibration(_fast(), rough_model, skew_surface, curve).leverage
    path = tmp_path / "leverage.csv"
    lev.to_csv(path)
    back = LeverageSurface.from_csv(path)
    assert back.times == lev.times
    for a, b in zip(lev.values, back.values):
        assert np.array_equal(a, b)
    S = np.linspace(50, 200, 31)
    assert np.array_equal(lev(S, 0.3), back(S, 0.3))


def test_leverage_surface_lookup():
    lev = LeverageSurface([0.0, 0.5], [[90, 100, 110], [80, 100, 120]], [[1, 2, 3], [3, 2, 1]])
    assert lev.slice_index(0.0) == 0 and lev.slice_index(0.4999) == 0 and lev.slice_index(0.5) == 1
    assert np.allclose(lev([50, 100, 500], 0.2), [1, 2, 3])
    with pytest.raises(ValueError):
        lev.append(0.5, [1, 2], [1, 1])
    with pytest.raises(ValueError):
        lev.append(1.0, [1, 2], [1, -1])


def test_sklearn_interface(rough_model, skew_surface, curve):
    est = LSVCalibrator(model=rough_model, config=_fast(horizon=0.5), reprice_particles=20_000)
    params = est.get_params()
    assert set(params) == {"model", "config", "reprice_particles"}
    assert clone(est).get_params()["reprice_particles"] == 20_000
    est.fit(skew_surface, curve)
    X = np.array([[0.25, 95.0], [0.25, 100.0], [0.5, 105.0]])
    iv = est.predict(X)
    target = np.array([skew_surface.implied_vol(K, T) for T, K in X])
    assert np.all(np.abs(iv - target) < 0.03)
    assert est.score(X, target) == pytest.approx(-1e4 * np.max(np.abs(iv - target)))
