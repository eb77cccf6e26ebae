import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.stats import norm

from lsvcal.market_data import (
    ArbitrageError,
    DiscountCurve,
    ImpliedVolSurface,
    LocalVolSurface,
    MarketDataError,
    SyntheticSurfaceSpec,
    black_call,
    call_price_derivatives,
    check_density,
    dupire_local_vol,
    load_curve,
    load_surface,
    mean_short_rate,
    synthesize_surface,
    write_surface,
)

from .conftest import vasicek_curve


# -- discount curve --------------------------------------------------------


def test_mean_short_rate_of_exponential_curve():
    curve = DiscountCurve.flat(0.015)
    assert np.allclose(mean_short_rate(curve, [0.0, 0.3, 1.7, 10.0]), 0.015, atol=1e-9)


def test_mean_short_rate_of_unit_curve_is_zero():
    curve = DiscountCurve([1.0, 5.0], [1.0, 1.0])
    assert np.all(mean_short_rate(curve, [0.0, 2.0, 5.0]) == 0.0)


def test_vasicek_curve_forward_rate_matches_closed_form(rates):
    curve = vasicek_curve(rates, n=5001)
    t = np.array([0.25, 1.0, 2.5, 4.0])
    assert np.allclose(curve.mean_short_rate(t), rates.forward_rate(t), atol=1e-6)


def test_integrated_short_rate_reproduces_log_zcb(rates):
    curve = vasicek_curve(rates, n=2001)
    for t in (0.5, 1.0, 3.0):
        nodes = curve.tenors[curve.tenors <= t]
        # exact for the log-linear interpolant: integrate each linear piece separately
        pieces = [integrate.quad(curve.mean_short_rate, a, b)[0] for a, b in zip(nodes[:-1], nodes[1:])]
        assert abs(sum(pieces) + float(curve.log_zcb(t))) < 1e-8


def test_curve_rejects_bad_input():
    with pytest.raises(MarketDataError):
        DiscountCurve([0.0, 1.0], [0.9, 0.95])
    with pytest.raises(ValueError):
        DiscountCurve([1.0, 0.5], [0.99, 0.98])
    with pytest.raises(ValueError):
        DiscountCurve([1.0], [-0.5])


def test_curve_csv_round_trip(tmp_path, rates):
    curve = vasicek_curve(rates, n=11)
    curve.to_csv(tmp_path / "c.csv")
    back = load_curve(tmp_path / "c.csv")
    assert np.array_equal(back.tenors, curve.tenors)
    assert np.array_equal(back.zcb_values, curve.zcb_values)


# -- surfaces ----------------------------------------------------------------


def test_load_flat_surface(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("T,K,iv\n1.0,90,0.2\n1.0,100,0.2\n1.0,110,0.2\n")
    surf = load_surface(p, 100.0, DiscountCurve.flat(0.0))
    assert np.allclose(surf.implied_vol(np.array([50.0, 95.0, 140.0]), 1.0), 0.2)


def test_negative_vol_rejected(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("T,K,iv\n1.0,90,0.2\n1.0,100,-0.2\n1.0,110,0.2\n")
    with pytest.raises(ArbitrageError) as err:
        load_surface(p, 100.0, DiscountCurve.flat(0.0))
    assert err.value.cells == [(100.0, 1.0)]


def test_bad_header_rejected(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("T,strike,iv\n1.0,90,0.2\n")
    with pytest.raises(MarketDataError):
        load_surface(p, 100.0, DiscountCurve.flat(0.0))


def test_missing_file_is_io_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_surface(tmp_path / "nope.csv", 100.0, DiscountCurve.flat(0.0))


def test_svi_export_round_trip(tmp_path, skew_surface, curve):
    write_surface(skew_surface, tmp_path / "s.csv")
    back = load_surface(tmp_path / "s.csv", skew_surface.spot, curve)
    for T, K in zip(skew_surface.maturities, skew_surface.strikes):
        assert np.max(np.abs(back.implied_vol(K, T) - skew_surface.implied_vol(K, T))) < 1e-12


def test_arbitrageable_quotes_flagged():
    curve = DiscountCurve.flat(0.0)
    # a vol spike makes the call price locally concave
    with pytest.raises(ArbitrageError):
        ImpliedVolSurface([1.0], [[90, 95, 100, 105, 110]], [[0.2, 0.2, 0.6, 0.2, 0.2]], 100.0, curve)


def test_zero_skew_spec_is_flat(flat_spec):
    surf = synthesize_surface(flat_spec, DiscountCurve.flat(0.01))
    K = np.linspace(50, 200, 13)
    for T in (0.3, 0.5, 0.75, 1.0, 2.0, 3.0):
        assert np.allclose(surf.implied_vol(K, T), 0.2, atol=1e-14)


def test_negative_skew_spec(skew_surface):
    for T in skew_surface.maturities:
        assert skew_surface.implied_vol(80.0, T) > skew_surface.implied_vol(120.0, T)


@settings(max_examples=25, deadline=None)
@given(
    atm=st.floats(0.1, 0.5),
    rho=st.floats(-0.9, 0.9),
    eta=st.floats(0.1, 1.0),
    gamma=st.floats(0.1, 0.5),
)
def test_ssvi_butterflies_non_negative(atm, rho, eta, gamma):
    eta = min(eta, 1.99 / (1 + abs(rho)))
    spec = SyntheticSurfaceSpec.from_ssvi((0.25, 1.0, 2.0), atm, rho, eta, gamma)
    surf = synthesize_surface(spec, DiscountCurve.flat(0.02))
    K = np.linspace(30.0, 300.0, 800)
    for T in spec.maturities:
        c = surf.call_price(K, T)
        fly = c[:-2] - 2 * c[1:-1] + c[2:]
        assert np.all(fly >= -1e-10)


def test_bad_svi_spec_rejected():
    spec = SyntheticSurfaceSpec((1.0,), ((0.04, 0.5, -0.99, 0.0, 0.01),))
    assert check_density(spec)
    with pytest.raises(ArbitrageError):
        synthesize_surface(spec, DiscountCurve.flat(0.0))


# -- Dupire ------------------------------------------------------------------


def test_flat_surface_zero_rates_dupire(flat_spec):
    curve = DiscountCurve([5.0], [1.0])
    surf = synthesize_surface(flat_spec, curve)
    for T in (0.1, 0.5, 0.8, 2.0, 3.0):
        lv = dupire_local_vol(surf, curve, np.linspace(60, 160, 11), T)
        assert np.max(np.abs(lv - 0.2)) < 1e-10


def test_convexity_floor_is_reported(flat_spec):
    curve = DiscountCurve([5.0], [1.0])
    surf = synthesize_surface(flat_spec, curve)
    floored = []
    lv = dupire_local_vol(surf, curve, np.array([20.0, 100.0]), 0.01, floored=floored)
    assert floored == [(20.0, 0.01)]
    assert np.allclose(lv, 0.2, atol=1e-10)


def test_flat_surface_flat_rate_dupire(flat_spec):
    curve = DiscountCurve.flat(0.03)
    surf = synthesize_surface(flat_spec, curve)
    grid = LocalVolSurface(surf, curve).grid([0.25, 0.6, 1.0, 1.5], np.linspace(60, 160, 21))
    assert np.ptp(grid) < 1e-10
    assert abs(grid[0, 0] - 0.2) < 1e-10


def _dupire_fd(surf, curve, K, T, hK, hT):
    """Dupire from central finite differences of call prices."""
    c = surf.call_price
    rbar = float(curve.mean_short_rate(T))
    c_t = (c(K, T + hT) - c(K, T - hT)) / (2 * hT)
    c_k = (c(K + hK, T) - c(K - hK, T)) / (2 * hK)
    c_kk = (c(K + hK, T) - 2 * c(K, T) + c(K - hK, T)) / hK**2
    return np.sqrt((c_t + rbar * K * c_k) / (0.5 * K * K * c_kk))


def test_dupire_matches_refined_finite_differences(skew_surface, curve):
    K = np.array([75.0, 90.0, 100.0, 110.0, 130.0])
    for T in (0.4, 0.75, 1.5):
        coarse = _dupire_fd(skew_surface, curve, K, T, 0.4, 4e-3)
        fine = _dupire_fd(skew_surface, curve, K, T, 0.1, 1e-3)
        lv = dupire_local_vol(skew_surface, curve, K, T)
        # the refined grid sits much closer than the coarse one
        assert np.max(np.abs(lv / fine - 1)) < 0.005
        assert np.max(np.abs(lv / fine - 1)) <= np.max(np.abs(lv / coarse - 1)) + 1e-12


def test_call_derivatives_match_black_partials():
    curve = DiscountCurve.flat(0.02)
    spec = SyntheticSurfaceSpec((1.0,), ((0.04, 0.0, 0.0, 0.0, 1.0),))
    surf = synthesize_surface(spec, curve)
    T, sig = 1.0, 0.2
    df = math.exp(-0.02 * T)
    F = 100.0 / df
    for K in (80.0, F, 125.0):
        d = call_price_derivatives(surf, curve, K, T)
        d1 = math.log(F / K) / (sig * math.sqrt(T)) + 0.5 * sig * math.sqrt(T)
        d2 = d1 - sig * math.sqrt(T)
        assert abs(d.dKK - df * norm.pdf(d2) / (K * sig * math.sqrt(T))) < 1e-6
        assert abs(d.dK + df * norm.cdf(d2)) < 1e-6
        theta = 100.0 * norm.pdf(d1) * sig / (2 * math.sqrt(T)) + 0.02 * K * df * norm.cdf(d2)
        assert abs(d.dT - theta) < 1e-6


def test_call_derivatives_match_bump_and_reprice(skew_surface, curve):
    K = np.array([70.0, 95.0, 100.0, 118.0, 150.0])
    T = 0.8
    d = call_price_derivatives(skew_surface, curve, K, T)
    c = skew_surface.call_price
    hK, hT = 1e-3, 1e-5
    fd_k = (c(K + hK, T) - c(K - hK, T)) / (2 * hK)
    fd_kk = (c(K + hK, T) - 2 * c(K, T) + c(K - hK, T)) / hK**2
    fd_t = (c(K, T + hT) - c(K, T - hT)) / (2 * hT)
    assert np.allclose(d.dK, fd_k, rtol=1e-4)
    assert np.allclose(d.dKK, fd_kk, rtol=1e-4)
    assert np.allclose(d.dT, fd_t, rtol=1e-4)
    assert np.allclose(d.price, c(K, T), rtol=1e-14)


def test_deep_strike_bounds(flat_spec):
    curve = DiscountCurve.flat(0.02)
    surf = synthesize_surface(flat_spec, curve)
    K = np.linspace(150.0, 400.0, 50)
    d = call_price_derivatives(surf, curve, K, 1.0)
    df = float(curve.zcb(1.0))
    assert np.all((d.dK <= 0) & (d.dK >= -df))
    assert np.all(d.dKK >= 0)


@settings(max_examples=20, deadline=None)
@given(T=st.floats(0.05, 2.5), K=st.floats(40.0, 250.0))
def test_strike_convexity_non_negative(T, K):
    curve = DiscountCurve.flat(0.01)
    surf = synthesize_surface(SyntheticSurfaceSpec.from_ssvi((0.25, 0.5, 1.0, 2.0)), curve)
    assert call_price_derivatives(surf, curve, K, T).dKK >= -1e-12


def test_black_call_limits():
    assert black_call(100.0, 90.0, 0.0, 0.9) == pytest.approx(9.0)
    assert black_call(100.0, 1e-12, 0.04, 1.0) == pytest.approx(100.0)
