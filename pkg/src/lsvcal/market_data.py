"""Market inputs: discount curves, implied volatility surfaces, Dupire local volatility.

Surfaces are parameterised in total implied variance ``w(k, T) = iv**2 * T`` as a
function of log-moneyness ``k = log(K / F(T))`` with ``F(T) = S0 / ZCB(T)``.
Between quoted maturities ``w`` is linear in ``T`` at fixed ``k``; before the
first quote and after the last one the smile is held at constant implied vol.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.stats import norm

from ._validation import check_finite, check_positive, check_sorted


class MarketDataError(ValueError):
    """Malformed or inconsistent market input."""


class ArbitrageError(MarketDataError):
    """Quotes violate static no-arbitrage constraints.

    ``cells`` lists the offending ``(K, T)`` pairs.
    """

    def __init__(self, message, cells=()):
        self.cells = list(cells)
        if self.cells:
            shown = ", ".join(f"(K={k:g}, T={t:g})" for k, t in self.cells[:10])
            message = f"{message}: {shown}" + (" ..." if len(self.cells) > 10 else "")
        super().__init__(message)


class DupireError(MarketDataError):
    """Local variance is not positive after denominator flooring."""


# ---------------------------------------------------------------------------
# Discount curve
# ---------------------------------------------------------------------------


class DiscountCurve:
    """Zero-coupon bond curve with log-linear interpolation.

    Parameters
    ----------
    tenors : array-like
        Strictly increasing times in years. A node ``(0, 1)`` is prepended
        when missing.
    zcb : array-like
        Bond prices at ``tenors``; strictly positive, ``ZCB(0) = 1``.
    """

    _FD_STEP = 1e-7

    def __init__(self, tenors, zcb):
        tenors = check_finite(np.asarray(tenors, dtype=float).ravel(), "tenors")
        zcb = check_finite(np.asarray(zcb, dtype=float).ravel(), "zcb")
        if tenors.shape != zcb.shape or tenors.size == 0:
            raise MarketDataError("tenors and zcb must be non-empty and of equal length")
        check_positive(zcb, "zcb")
        if tenors[0] < 0:
            raise MarketDataError("tenors must be non-negative")
        if tenors[0] > 0:
            tenors = np.concatenate([[0.0], tenors])
            zcb = np.concatenate([[1.0], zcb])
        elif abs(zcb[0] - 1.0) > 1e-14:
            raise MarketDataError("ZCB(0) must equal 1")
        check_sorted(tenors, "tenors", strict=True)
        if tenors.size < 2:
            raise MarketDataError("a curve needs at least one tenor beyond 0")
        self.tenors = tenors
        self.zcb_values = zcb
        self._log_zcb = np.log(zcb)
        self.tenors.flags.writeable = False
        self.zcb_values.flags.writeable = False

    @classmethod
    def flat(cls, rate, horizon=30.0, n=361):
        t = np.linspace(0.0, horizon, n)
        return cls(t, np.exp(-rate * t))

    @property
    def horizon(self):
        return float(self.tenors[-1])

    def _check_support(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-14) or np.any(t > self.horizon + 1e-12):
            raise MarketDataError(f"t outside curve support [0, {self.horizon:g}]")
        return np.clip(t, 0.0, self.horizon)

    def log_zcb(self, t):
        t = self._check_support(t)
        return np.interp(t, self.tenors, self._log_zcb)

    def zcb(self, t):
        return np.exp(self.log_zcb(t))

    def mean_short_rate(self, t):
        """Instantaneous forward ``-d/dt log ZCB(t)`` by centred differences."""
        t = self._check_support(t)
        h = self._FD_STEP
        lo = np.maximum(t - h, 0.0)
        hi = np.minimum(t + h, self.horizon)
        return -(np.interp(hi, self.tenors, self._log_zcb) - np.interp(lo, self.tenors, self._log_zcb)) / (hi - lo)

    def forward(self, spot, t):
        return spot / self.zcb(t)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "zcb"])
            for t, z in zip(self.tenors, self.zcb_values):
                writer.writerow([repr(float(t)), repr(float(z))])


def mean_short_rate(curve: DiscountCurve, t):
    """Mean short rate implied by the curve, ``-d/dt log ZCB(t)``."""
    return curve.mean_short_rate(t)


def load_curve(path) -> DiscountCurve:
    rows = _read_csv(path, ("t", "zcb"))
    return DiscountCurve([r[0] for r in rows], [r[1] for r in rows])


# ---------------------------------------------------------------------------
# Black helpers
# ---------------------------------------------------------------------------


def black_call(forward, strike, total_variance, discount=1.0):
    """Undiscounted Black price scaled by ``discount``; vectorised."""
    forward, strike, w = np.broadcast_arrays(
        np.asarray(forward, float), np.asarray(strike, float), np.asarray(total_variance, float)
    )
    sw = np.sqrt(np.maximum(w, 0.0))
    intrinsic = np.maximum(forward - strike, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.log(forward / strike) / sw + 0.5 * sw
        price = forward * norm.cdf(d1) - strike * norm.cdf(d1 - sw)
    price = np.where(sw > 0, price, intrinsic)
    return discount * price


# ---------------------------------------------------------------------------
# Surfaces
# ---------------------------------------------------------------------------


class VolSurface:
    """Common interface of implied volatility surfaces.

    Subclasses implement :meth:`_slice_w`, returning ``(w, w_k, w_kk)`` of the
    quoted slice ``j`` at log-moneyness ``k``.
    """

    spot: float
    curve: DiscountCurve
    maturities: np.ndarray

    def _slice_w(self, j, k):  # pragma: no cover - abstract
        raise NotImplementedError

    def log_moneyness(self, K, T):
        return np.log(np.asarray(K, float) / self.curve.forward(self.spot, T))

    def total_variance(self, k, T):
        """Return ``(w, w_k, w_kk, w_T)`` at log-moneyness ``k`` and maturity ``T``.

        ``w_T`` is the partial derivative at fixed ``k`` (right derivative at
        quoted maturities).
        """
        k = np.asarray(k, dtype=float)
        T = float(T)
        if T <= 0:
            raise MarketDataError("maturity must be positive")
        mats = self.maturities
        if T < mats[0] or mats.size == 1:
            j = 0 if T < mats[0] else mats.size - 1
            w, wk, wkk = self._slice_w(j, k)
            s = T / mats[j]
            return w * s, wk * s, wkk * s, w / mats[j]
        if T >= mats[-1]:
            w, wk, wkk = self._slice_w(mats.size - 1, k)
            s = T / mats[-1]
            return w * s, wk * s, wkk * s, w / mats[-1]
        j = int(np.searchsorted(mats, T, side="right")) - 1
        ta, tb = mats[j], mats[j + 1]
        a = (T - ta) / (tb - ta)
        wa, wka, wkka = self._slice_w(j, k)
        wb, wkb, wkkb = self._slice_w(j + 1, k)
        return (
            (1 - a) * wa + a * wb,
            (1 - a) * wka + a * wkb,
            (1 - a) * wkka + a * wkkb,
            (wb - wa) / (tb - ta),
        )

    def implied_vol(self, K, T):
        w = self.total_variance(self.log_moneyness(K, T), T)[0]
        return np.sqrt(w / T)

    def call_price(self, K, T):
        w = self.total_variance(self.log_moneyness(K, T), T)[0]
        return black_call(self.curve.forward(self.spot, T), K, w, self.curve.zcb(T))

    def to_grid(self, strikes_per_maturity=None):
        """Sample the surface on its maturities into an :class:`ImpliedVolSurface`."""
        strikes = []
        vols = []
        for j, T in enumerate(self.maturities):
            K = np.asarray(
                strikes_per_maturity[j] if strikes_per_maturity is not None else self.strikes[j], float
            )
            strikes.append(K)
            vols.append(self.implied_vol(K, T))
        return ImpliedVolSurface(self.maturities, strikes, vols, self.spot, self.curve, validate=False)


class ImpliedVolSurface(VolSurface):
    """Grid of implied volatility quotes.

    Each maturity slice is interpolated by a monotone cubic (PCHIP) in
    log-moneyness on total variance, with flat implied vol beyond the quoted
    strikes.

    Parameters
    ----------
    maturities : array-like of shape (n,)
    strikes : sequence of n arrays
        Strikes per maturity, strictly increasing.
    vols : sequence of n arrays
        Implied Black vols matching ``strikes``.
    spot : float
    curve : DiscountCurve
    validate : bool
        Run the static arbitrage check on construction.
    """

    def __init__(self, maturities, strikes, vols, spot, curve, validate=True, tol=1e-10):
        self.maturities = check_sorted(np.asarray(maturities, float).ravel(), "maturities", strict=True)
        check_positive(self.maturities, "maturities")
        if len(strikes) != self.maturities.size or len(vols) != self.maturities.size:
            raise MarketDataError("one strike/vol array per maturity is required")
        self.spot = float(check_positive(spot, "spot"))
        self.curve = curve
        self.strikes = []
        self.vols = []
        for T, K, v in zip(self.maturities, strikes, vols):
            K = np.asarray(K, float).ravel()
            v = np.asarray(v, float).ravel()
            if K.shape != v.shape or K.size == 0:
                raise MarketDataError(f"strike/vol mismatch at T={T:g}")
            check_positive(K, "strikes")
            check_sorted(K, f"strikes at T={T:g}", strict=True)
            bad = [(float(k), float(T)) for k, x in zip(K, v) if not (np.isfinite(x) and x > 0)]
            if bad:
                raise ArbitrageError("implied vols must be positive and finite", bad)
            K.flags.writeable = False
            v.flags.writeable = False
            self.strikes.append(K)
            self.vols.append(v)
        self._interp = []
        for T, K, v in zip(self.maturities, self.strikes, self.vols):
            k = np.log(K / curve.forward(self.spot, T))
            w = v * v * T
            if k.size == 1:
                self._interp.append((k, w, None))
            else:
                self._interp.append((k, w, PchipInterpolator(k, w, extrapolate=False)))
        if validate:
            self.check_arbitrage(tol)

    def _slice_w(self, j, k):
        knodes, wnodes, pchip = self._interp[j]
        k = np.asarray(k, float)
        if pchip is None:
            return np.full_like(k, wnodes[0]), np.zeros_like(k), np.zeros_like(k)
        kc = np.clip(k, knodes[0], knodes[-1])
        inside = (k >= knodes[0]) & (k <= knodes[-1])
        w = pchip(kc)
        wk = np.where(inside, pchip(kc, 1), 0.0)
        wkk = np.where(inside, pchip(kc, 2), 0.0)
        return w, wk, wkk

    def check_arbitrage(self, tol=1e-10):
        """Raise :class:`ArbitrageError` if quoted calls are not decreasing and convex in strike."""
        bad = []
        for T, K in zip(self.maturities, self.strikes):
            c = self.call_price(K, T)
            df = self.curve.zcb(T)
            scale = tol * self.spot
            if K.size >= 2:
                slope = np.diff(c) / np.diff(K)
                for i in np.flatnonzero((slope > scale) | (slope < -df - scale)):
                    bad.append((float(K[i + 1]), float(T)))
            if K.size >= 3:
                conv = slope[1:] - slope[:-1]
                for i in np.flatnonzero(conv < -scale):
                    bad.append((float(K[i + 1]), float(T)))
        if bad:
            raise ArbitrageError("call prices not monotone/convex in strike", sorted(set(bad)))


@dataclass(frozen=True)
class SyntheticSurfaceSpec:
    """Per-maturity raw SVI slices.

    ``params[j] = (a, b, rho, m, sigma)``: level, angle, skew, shift, curvature in
    ``w(k) = a + b * (rho * (k - m) + sqrt((k - m)**2 + sigma**2))``.
    """

    maturities: tuple
    params: tuple
    spot: float = 100.0

    @classmethod
    def from_ssvi(cls, maturities, atm_vol=0.2, rho=-0.6, eta=1.0, gamma=0.4, spot=100.0):
        """Raw SVI slices of an SSVI surface with power-law curvature.

        Arbitrage free when ``eta * (1 + |rho|) <= 2`` and ``0 < gamma <= 0.5``.
        """
        params = []
        for T in maturities:
            theta = atm_vol**2 * T
            phi = eta / (theta**gamma * (1 + theta) ** (1 - gamma))
            params.append(
                (
                    0.5 * theta * (1 - rho * rho),
                    0.5 * theta * phi,
                    rho,
                    -rho / phi,
                    np.sqrt(1 - rho * rho) / phi,
                )
            )
        return cls(tuple(float(t) for t in maturities), tuple(tuple(map(float, p)) for p in params), spot)


def svi_total_variance(params, k):
    """Raw SVI total variance and its first two derivatives in ``k``."""
    a, b, rho, m, s = params
    x = np.asarray(k, float) - m
    r = np.sqrt(x * x + s * s)
    return a + b * (rho * x + r), b * (rho + x / r), b * s * s / r**3


def density_factor(w, wk, wkk, k):
    """Gatheral's ``g(k)``; the risk-neutral density is non-negative iff ``g >= 0``."""
    return (1 - 0.5 * k * wk / w) ** 2 - 0.25 * wk * wk * (1 / w + 0.25) + 0.5 * wkk


class SVISurface(VolSurface):
    """Analytic surface built from a :class:`SyntheticSurfaceSpec`."""

    def __init__(self, spec: SyntheticSurfaceSpec, curve: DiscountCurve, strikes=None):
        self.spec = spec
        self.maturities = check_sorted(np.asarray(spec.maturities, float), "maturities", strict=True)
        check_positive(self.maturities, "maturities")
        self.params = np.asarray(spec.params, float).reshape(-1, 5)
        if self.params.shape[0] != self.maturities.size:
            raise MarketDataError("one SVI parameter block per maturity is required")
        self.spot = float(spec.spot)
        self.curve = curve
        if strikes is None:
            strikes = [self.spot * np.exp(np.linspace(-0.7, 0.7, 29)) for _ in self.maturities]
        self.strikes = [np.asarray(K, float) for K in strikes]

    def _slice_w(self, j, k):
        return svi_total_variance(self.params[j], k)


def check_density(spec: SyntheticSurfaceSpec, k_grid=None):
    """Return offending ``(k, T)`` cells where the slice density or calendar order fails."""
    k = np.linspace(-3.0, 3.0, 1201) if k_grid is None else np.asarray(k_grid, float)
    bad = []
    prev = None
    for T, p in zip(spec.maturities, spec.params):
        a, b, rho, m, s = p
        if b < 0 or abs(rho) >= 1 or s <= 0 or a + b * s * np.sqrt(1 - rho * rho) < 0:
            bad.append((float("nan"), float(T)))
            continue
        w, wk, wkk = svi_total_variance(p, k)
        g = density_factor(w, wk, wkk, k)
        bad.extend((float(x), float(T)) for x in k[(g < -1e-12) | (w <= 0)])
        if prev is not None:
            bad.extend((float(x), float(T)) for x in k[w < prev - 1e-14])
        prev = w
    return bad


def synthesize_surface(spec: SyntheticSurfaceSpec, curve: DiscountCurve, strikes=None) -> SVISurface:
    """Build a smooth arbitrage-free calibration target from SVI slices."""
    bad = check_density(spec)
    if bad:
        raise ArbitrageError("synthetic spec violates density constraints", [(k, t) for k, t in bad])
    return SVISurface(spec, curve, strikes)


# ---------------------------------------------------------------------------
# Dupire
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CallDerivatives:
    price: np.ndarray
    dT: np.ndarray
    dK: np.ndarray
    dKK: np.ndarray


def call_price_derivatives(surface: VolSurface, curve: DiscountCurve, K, T) -> CallDerivatives:
    """Discounted call price and its partials in maturity and strike.

    Strike derivatives follow from the smile's ``w_k, w_kk`` through Black's
    formula; the maturity derivative is taken analytically at fixed strike,
    including the drift of the forward.
    """
    K = np.asarray(K, float)
    T = float(T)
    df = curve.zcb(T)
    rbar = curve.mean_short_rate(T)
    fwd = surface.spot / df
    k = np.log(K / fwd)
    w, wk, wkk, wT = surface.total_variance(k, T)
    sw = np.sqrt(w)
    d2 = -k / sw - 0.5 * sw
    pdf2 = norm.pdf(d2)
    cdf2 = norm.cdf(d2)
    price = black_call(fwd, K, w, df)
    # dk/dT at fixed K is -rbar, so dw/dT|_K = w_T - rbar * w_k
    dw_dT = wT - rbar * wk
    dT = K * df * pdf2 / (2 * sw) * dw_dT + K * rbar * df * cdf2
    dK = df * (-cdf2 + pdf2 * wk / (2 * sw))
    dKK = df * pdf2 / (K * sw) * density_factor(w, wk, wkk, k)
    return CallDerivatives(price, dT, dK, dKK)


@dataclass
class LocalVolSurface:
    """Dupire local volatility of an implied surface, evaluated lazily.

    ``floored`` accumulates ``(K, T)`` cells where the strike convexity hit the
    floor ``1e-10 / S0``.
    """

    surface: VolSurface
    curve: DiscountCurve
    floored: list = field(default_factory=list)

    def __call__(self, K, T):
        return dupire_local_vol(self.surface, self.curve, K, T, floored=self.floored)

    def grid(self, maturities, strikes):
        """Evaluate on a rectangular grid; returns an array ``(len(maturities), len(strikes))``."""
        return np.vstack([self(strikes, T) for T in maturities])


G_FLOOR = 1e-10


def dupire_local_vol(surface: VolSurface, curve: DiscountCurve, K, T, floored=None):
    """Dupire local volatility; the forward, and so the mean short rate, is taken at maturity ``T``.

    The common factor ``ZCB * phi(d2) / sqrt(w)`` of numerator and
    denominator is cancelled analytically, leaving ``w_T / g``, which does not
    underflow in the far wings. ``g`` is floored at ``G_FLOOR``. Cells whose
    strike convexity falls below ``1e-10 / S0`` are appended to ``floored``.
    """
    K_arr = np.atleast_1d(np.asarray(K, float))
    T = float(T)
    d = call_price_derivatives(surface, curve, K_arr, T)
    floor = 1e-10 / surface.spot
    hit = d.dKK < floor
    if floored is not None:
        floored.extend((float(k), T) for k in K_arr[hit])
    k = surface.log_moneyness(K_arr, T)
    w, wk, wkk, wT = surface.total_variance(k, T)
    var = wT / np.maximum(density_factor(w, wk, wkk, k), G_FLOOR)
    bad = ~(np.isfinite(var) & (var > 0))
    if np.any(bad):
        cells = [(float(x), T) for x in K_arr[bad]]
        raise DupireError(f"non-positive local variance at {cells[:5]}")
    out = np.sqrt(var)
    return out if np.ndim(K) else float(out[0])


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def _read_csv(path, header):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MarketDataError(f"{path}: empty file") from None
        if tuple(head) != tuple(header):
            raise MarketDataError(f"{path}: expected header {','.join(header)}, got {','.join(head)}")
        rows = []
        for n, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MarketDataError(f"{path}:{n}: expected {len(header)} fields")
            try:
                rows.append(tuple(float(c) for c in row))
            except ValueError:
                raise MarketDataError(f"{path}:{n}: non-numeric field") from None
    if not rows:
        raise MarketDataError(f"{path}: no data rows")
    return rows


def load_surface(path, spot, curve: DiscountCurve) -> ImpliedVolSurface:
    """Read a ``T,K,iv`` quote file into a validated surface."""
    rows = _read_csv(path, ("T", "K", "iv"))
    by_t = {}
    for T, K, iv in rows:
        by_t.setdefault(T, []).append((K, iv))
    mats = sorted(by_t)
    strikes, vols = [], []
    for T in mats:
        quotes = sorted(by_t[T])
        strikes.append([q[0] for q in quotes])
        vols.append([q[1] for q in quotes])
    return ImpliedVolSurface(mats, strikes, vols, spot, curve)


def write_surface(surface: VolSurface, path):
    """Write surface quotes as ``T,K,iv`` with round-trip precision."""
    grid = surface if isinstance(surface, ImpliedVolSurface) else surface.to_grid()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["T", "K", "iv"])
        for T, K, v in zip(grid.maturities, grid.strikes, grid.vols):
            for k, iv in zip(K, v):
                writer.writerow([repr(float(T)), repr(float(k)), repr(float(iv))])
