"""Hybrid stochastic volatility drivers: correlated Brownian block, tempered
rough Bergomi and two-factor Bergomi variance, Vasicek short rate.

All randomness is drawn from counter-based Philox streams keyed by
``(seed, driver, step, chunk)``, where a chunk is a fixed block of
``CHUNK`` consecutive particles. Results therefore do not depend on how many
worker threads process the chunks.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, special
from threadpoolctl import threadpool_limits

from ._validation import check_in_range, check_int, check_positive, check_sorted

CHUNK = 4096

# stream identifiers
_Z = 0  # first of n correlated Z drivers: ids 0..n-1
_W_PERP = 100
_VOLTERRA = 101
_OU_RESID = 102
_RATE_RESID = 110


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Random streams and linear algebra helpers
# ---------------------------------------------------------------------------


def normal_stream(seed, driver, step, chunk, size):
    """Standard normals for one ``(seed, driver, step, chunk)`` key."""
    key = np.random.SeedSequence([int(seed), int(driver), int(step), int(chunk)]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(size)


def _chunks(n_particles):
    return [(c, c * CHUNK, min((c + 1) * CHUNK, n_particles)) for c in range((n_particles + CHUNK - 1) // CHUNK)]


def _run_chunks(fn, n_particles, threads):
    jobs = _chunks(n_particles)
    with threadpool_limits(limits=1):
        if threads <= 1 or len(jobs) == 1:
            for job in jobs:
                fn(*job)
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                list(pool.map(lambda j: fn(*j), jobs))


def psd_cholesky(a, tol=1e-12):
    """Lower factor ``L`` with ``L @ L.T == a`` for positive semi-definite ``a``.

    Falls back to a pivot-tolerant column algorithm when ``a`` is singular;
    zero pivots (relative to ``tol * max(diag)``) produce zero columns.
    """
    a = np.asarray(a, float)
    try:
        return linalg.cholesky(a, lower=True)
    except linalg.LinAlgError:
        pass
    n = a.shape[0]
    scale = max(float(np.max(np.abs(np.diag(a)))), 1e-300)
    L = np.zeros_like(a)
    for j in range(n):
        piv = a[j, j] - L[j, :j] @ L[j, :j]
        if piv < -tol * scale * 1e3:
            eig = float(np.min(np.linalg.eigvalsh(a)))
            raise ModelError(f"covariance not positive semi-definite (smallest eigenvalue {eig:.3e})")
        if piv <= tol * scale:
            continue
        L[j, j] = math.sqrt(piv)
        L[j + 1 :, j] = (a[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]) / L[j, j]
    return L


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform simulation grid ``t_i = i * dt``, ``i = 0..n_steps``."""

    dt: float
    n_steps: int

    def __post_init__(self):
        check_positive(self.dt, "dt")
        check_int(self.n_steps, "n_steps", minimum=1)

    @classmethod
    def covering(cls, horizon, dt):
        return cls(dt, int(math.ceil(horizon / dt - 1e-9)))

    @property
    def times(self):
        return self.dt * np.arange(self.n_steps + 1)

    @property
    def horizon(self):
        return self.dt * self.n_steps

    def index(self, t):
        i = int(round(t / self.dt))
        if abs(i * self.dt - t) > 1e-9 or not 0 <= i <= self.n_steps:
            raise ModelError(f"t={t} is not a node of the simulation grid")
        return i


@dataclass(frozen=True)
class ForwardVariance:
    """Piecewise-constant forward variance curve ``xi0(t)``."""

    times: tuple = (0.0,)
    values: tuple = (0.04,)

    def __post_init__(self):
        t = np.asarray(self.times, float)
        v = np.asarray(self.values, float)
        if t.shape != v.shape or t.size == 0 or t[0] != 0.0:
            raise ModelError("forward variance needs matching times/values starting at t=0")
        check_sorted(t, "xi0 times", strict=True)
        check_positive(v, "xi0")

    @classmethod
    def flat(cls, value):
        return cls((0.0,), (float(value),))

    @classmethod
    def from_csv(cls, path):
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if header != ["t", "xi0"]:
                raise ModelError(f"{path}: expected header t,xi0")
            rows = [(float(a), float(b)) for a, b in reader if a.strip()]
        return cls(tuple(r[0] for r in rows), tuple(r[1] for r in rows))

    def __call__(self, t):
        idx = np.searchsorted(np.asarray(self.times), np.asarray(t, float), side="right") - 1
        return np.asarray(self.values)[np.clip(idx, 0, None)]


def _as_xi0(x):
    if isinstance(x, ForwardVariance):
        return x
    return ForwardVariance.flat(float(x))


@dataclass(frozen=True)
class RoughVolParams:
    """Tempered rough Bergomi variance ``V_t = xi0(t) E(nu sqrt(2H) int (t-s)^(H-1/2) e^{-beta(t-s)} dZ_s)``.

    ``nu = 0`` gives constant variance ``xi0``.
    """

    H: float = 0.2
    beta: float = 0.5
    nu: float = 2.0
    xi0: ForwardVariance = field(default_factory=lambda: ForwardVariance.flat(0.04))

    def __post_init__(self):
        check_in_range(self.H, "H", 0.0, 0.5, lo_open=True)
        check_in_range(self.beta, "beta", 0.0, math.inf)
        check_in_range(self.nu, "nu", 0.0, math.inf)
        object.__setattr__(self, "xi0", _as_xi0(self.xi0))


@dataclass(frozen=True)
class Bergomi2FParams:
    kappa_x: float = 0.5
    kappa_y: float = 8.0
    theta: float = 0.8
    nu: float = 4.0
    rho_wx: float = -0.1
    rho_wy: float = -0.8
    rho_xy: float = 0.3
    xi0: ForwardVariance = field(default_factory=lambda: ForwardVariance.flat(0.04))
    alpha_theta: float | None = None

    def __post_init__(self):
        check_positive(self.kappa_x, "kappa_x")
        check_positive(self.kappa_y, "kappa_y")
        check_in_range(self.theta, "theta", 0.0, 1.0)
        check_in_range(self.nu, "nu", 0.0, math.inf)
        for name in ("rho_wx", "rho_wy", "rho_xy"):
            check_in_range(getattr(self, name), name, -1.0, 1.0)
        object.__setattr__(self, "xi0", _as_xi0(self.xi0))
        if self.alpha_theta is None:
            th = self.theta
            norm2 = (1 - th) ** 2 + th**2 + 2 * th * (1 - th) * self.rho_xy
            object.__setattr__(self, "alpha_theta", 1.0 / math.sqrt(norm2))


@dataclass(frozen=True)
class VasicekParams:
    """Short rate ``dr = (r0 - kappa r) dt + sigma dY``; long-run mean ``r0 / kappa``.

    ``rho_zy`` is the correlation of ``Y`` with the variance driver(s); a tuple
    gives one value per variance driver. ``r_init`` defaults to ``r0 / kappa``.
    """

    kappa: float = 1.0
    sigma: float = 0.005
    r0: float = 0.015
    rho_wy: float = 0.0
    rho_zy: float | tuple = 0.0
    r_init: float | None = None

    def __post_init__(self):
        check_positive(self.kappa, "kappa")
        check_positive(self.sigma, "sigma", strict=False)
        check_in_range(self.rho_wy, "rho_wy", -1.0, 1.0)
        if self.r_init is None:
            object.__setattr__(self, "r_init", self.r0 / self.kappa)

    @property
    def long_run_mean(self):
        return self.r0 / self.kappa

    def mean(self, t):
        th = self.long_run_mean
        return th + (self.r_init - th) * np.exp(-self.kappa * np.asarray(t, float))

    def zcb(self, t):
        """Closed-form bond price ``E[exp(-int_0^t r)]``."""
        t = np.asarray(t, float)
        k, s, th = self.kappa, self.sigma, self.long_run_mean
        B = (1 - np.exp(-k * t)) / k
        A = (th - s * s / (2 * k * k)) * (B - t) - s * s * B * B / (4 * k)
        return np.exp(A - B * self.r_init)

    def forward_rate(self, t):
        """Instantaneous forward ``-d/dt log zcb(t)``."""
        t = np.asarray(t, float)
        k, s, th = self.kappa, self.sigma, self.long_run_mean
        e = np.exp(-k * t)
        B = (1 - e) / k
        return self.r_init * e + th * (1 - e) - s * s / 2 * B * B


# ---------------------------------------------------------------------------
# Correlation structure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationStructure:
    """Correlation of ``(W, Z)`` with ``corr(W, Z) = rho_wz`` and ``corr(Z) = sigma_z``.

    On construction caches ``projection = sigma_z^{-1} rho_wz`` (so that
    ``W_par = projection . Z``), ``rho_hat2 = rho_wz . projection`` and a
    lower factor of ``sigma_z``.
    """

    rho_wz: tuple
    sigma_z: tuple
    projection: np.ndarray = field(init=False, repr=False, compare=False)
    rho_hat2: float = field(init=False, compare=False)
    chol_z: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rho = np.atleast_1d(np.asarray(self.rho_wz, float))
        sz = np.atleast_2d(np.asarray(self.sigma_z, float))
        n = rho.size
        if sz.shape != (n, n):
            raise ModelError(f"sigma_z must be {n}x{n}")
        if not np.allclose(sz, sz.T, atol=1e-14) or not np.allclose(np.diag(sz), 1.0, atol=1e-14):
            raise ModelError("sigma_z must be symmetric with unit diagonal")
        full = np.block([[np.ones((1, 1)), rho[None, :]], [rho[:, None], sz]])
        eig = np.linalg.eigvalsh(full)
        if eig[0] < -1e-12:
            raise ModelError(f"correlation matrix not PSD (smallest eigenvalue {eig[0]:.3e})")
        proj = np.linalg.pinv(sz, rcond=1e-13) @ rho
        rho_hat2 = float(rho @ proj)
        if rho_hat2 > 1 + 1e-12 or rho_hat2 < -1e-12:
            raise ModelError(f"rho_hat^2 = {rho_hat2} outside [0, 1]")
        object.__setattr__(self, "rho_wz", tuple(rho.tolist()))
        object.__setattr__(self, "sigma_z", tuple(map(tuple, sz.tolist())))
        object.__setattr__(self, "projection", proj)
        object.__setattr__(self, "rho_hat2", min(max(rho_hat2, 0.0), 1.0))
        object.__setattr__(self, "chol_z", psd_cholesky(sz))

    @property
    def n(self):
        return len(self.rho_wz)

    @property
    def full(self):
        rho = np.asarray(self.rho_wz)
        return np.block([[np.ones((1, 1)), rho[None, :]], [rho[:, None], np.asarray(self.sigma_z)]])


def validate_correlation(cs: CorrelationStructure) -> CorrelationStructure:
    """Re-run the structural checks; returns ``cs`` with cached projections."""
    return CorrelationStructure(cs.rho_wz, cs.sigma_z)


@dataclass
class DriverPaths:
    """Brownian increments on a grid, laid out ``(particle, step[, driver])``."""

    grid: TimeGrid
    dW: np.ndarray
    dZ: np.ndarray
    dW_par: np.ndarray


def _chunk_dz(cs, grid, seed, chunk, size):
    n, N = cs.n, grid.n_steps
    xi = np.empty((size, N, n))
    for d in range(n):
        for i in range(N):
            xi[:, i, d] = normal_stream(seed, _Z + d, i, chunk, size)
    return math.sqrt(grid.dt) * (xi @ cs.chol_z.T)


def _spot_noise(seed, step, n_particles):
    out = np.empty(n_particles)
    for c, lo, hi in _chunks(n_particles):
        out[lo:hi] = normal_stream(seed, _W_PERP, step, c, hi - lo)
    return out


def simulate_drivers(cs: CorrelationStructure, grid: TimeGrid, n_particles, seed=0, threads=1) -> DriverPaths:
    """Correlated increments ``(dW, dZ)`` with covariance ``Sigma * dt`` per step."""
    M, N = check_int(n_particles, "n_particles", 1), grid.n_steps
    dZ = np.empty((M, N, cs.n))

    def work(c, lo, hi):
        dZ[lo:hi] = _chunk_dz(cs, grid, seed, c, hi - lo)

    _run_chunks(work, M, threads)
    dW_par = dZ @ cs.projection
    perp = math.sqrt(max(1.0 - cs.rho_hat2, 0.0) * grid.dt)
    dW = dW_par.copy()
    for i in range(N):
        dW[:, i] += perp * _spot_noise(seed, i, M)
    return DriverPaths(grid, dW, dZ, dW_par)


# ---------------------------------------------------------------------------
# Rough (tempered Volterra) variance
# ---------------------------------------------------------------------------


def _gauss_legendre(n=24):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


def _kernel(u, H, beta):
    return u ** (H - 0.5) * np.exp(-beta * u)


def _int_power_exp(a, b, dt):
    """``int_0^dt u^(a-1) e^{-b u} du`` for ``a > 0``."""
    if b == 0:
        return dt**a / a
    return special.gammainc(a, b * dt) * special.gamma(a) / b**a


class VolterraCovariance:
    """Exact joint covariance of ``(dZ_1, G_1, ..., dZ_N, G_N)`` on a uniform grid.

    ``G_i = nu sqrt(2H) int_0^{t_i} k(t_i - s) dZ_s`` with
    ``k(u) = u^(H-1/2) e^{-beta u}``. Entries are exact sums of per-interval
    integrals evaluated by Gauss-Legendre (smooth cells) and Gauss-Jacobi
    (cells touching the kernel singularity) quadrature.
    """

    def __init__(self, params: RoughVolParams, grid: TimeGrid, n_nodes=24):
        self.params = params
        self.grid = grid
        H, beta, nu = params.H, params.beta, params.nu
        dt, N = grid.dt, grid.n_steps
        scale = nu * math.sqrt(2 * H)
        a = H - 0.5
        lx, lw = _gauss_legendre(n_nodes)
        jx, jw = special.roots_jacobi(n_nodes, 0.0, a)
        ju = dt * (1 + jx) / 2
        jw = jw * (dt / 2) ** (a + 1)  # int_0^dt u^a f(u) du = sum jw * f(ju)
        u = dt * lx
        lw = dt * lw
        m = np.arange(N, dtype=float)[:, None]
        # A[m] = int_0^dt k(m dt + u) du
        A = np.empty(N)
        A[0] = _int_power_exp(H + 0.5, beta, dt)
        if N > 1:
            A[1:] = (_kernel(m[1:] * dt + u, H, beta) * lw).sum(axis=1)
        # c[m, d] = int_0^dt k(m dt + u) k((m + d) dt + u) du, stored for m + d < N
        c = np.zeros((N, N))
        mm = np.arange(N)
        for d in range(N):
            ms = mm[: N - d]
            if d == 0:
                c[0, 0] = _int_power_exp(2 * H, 2 * beta, dt)
            else:
                c[0, d] = (np.exp(-beta * ju) * _kernel(d * dt + ju, H, beta) * jw).sum()
            if ms.size > 1:
                x = ms[1:, None] * dt + u
                c[1 : N - d, d] = (_kernel(x, H, beta) * _kernel(x + d * dt, H, beta) * lw).sum(axis=1)
        self.A = scale * A
        # cov(G_i, G_j), i >= j (1-based) = sum_{m < j} c[m, i - j]
        cum = np.cumsum(c, axis=0)
        cov_g = np.zeros((N, N))
        for d in range(N):
            j = np.arange(N - d)
            cov_g[j + d, j] = cum[j, d]
            cov_g[j, j + d] = cum[j, d]
        self.cov_g = scale * scale * cov_g
        joint = np.zeros((2 * N, 2 * N))
        iz = 2 * np.arange(N)
        ig = iz + 1
        joint[iz, iz] = dt
        joint[np.ix_(ig, ig)] = self.cov_g
        # cov(dZ_k, G_i) = A[i - k] for k <= i
        idx_i, idx_k = np.tril_indices(N)
        joint[ig[idx_i], iz[idx_k]] = self.A[idx_i - idx_k]
        joint[iz[idx_k], ig[idx_i]] = self.A[idx_i - idx_k]
        self.joint = joint
        self.L = psd_cholesky(joint)
        self._iz, self._ig = iz, ig
        # conditional law of G_i given the grid past (all variables of steps < i)
        self.lzz = self.L[ig, iz]  # loading of G_i on its own dZ normal
        self.lgg = self.L[ig, ig]
        self.nu_tilde = self.lzz**2 + self.lgg**2
        self.var_g = np.diag(self.cov_g).copy()

    def nu_tilde_continuous(self):
        """Conditional variance given the continuous-time past of ``Z``."""
        H, beta, nu = self.params.H, self.params.beta, self.params.nu
        return nu * nu * 2 * H * _int_power_exp(2 * H, 2 * beta, self.grid.dt) * np.ones(self.grid.n_steps)

    def sample(self, xi_z, xi_g):
        """Map standard normals ``(particles, N)`` to ``G`` of shape ``(particles, N)``."""
        xi = np.empty((xi_z.shape[0], 2 * xi_z.shape[1]))
        xi[:, self._iz] = xi_z
        xi[:, self._ig] = xi_g
        return xi @ self.L[self._ig].T

    def conditional_mean(self, G, xi_z, xi_g):
        """``E[G_i | variables of steps < i]`` pathwise."""
        return G - xi_z * self.lzz - xi_g * self.lgg


def volterra_variance_entry(params: RoughVolParams, t):
    """``Var(G_t) = nu^2 2H int_0^t u^(2H-1) e^{-2 beta u} du``."""
    return params.nu**2 * 2 * params.H * _int_power_exp(2 * params.H, 2 * params.beta, t)


def rough_variance_path(params: RoughVolParams, dZ, grid: TimeGrid, seed=0, chunk_offset=0, cov=None):
    """Variance paths ``V`` of shape ``(particles, N + 1)`` driven by ``dZ`` (particles, N).

    The orthogonal part of the Volterra integral uses streams keyed by the
    chunk index, so slices of a larger ensemble reproduce the same paths when
    ``chunk_offset`` points at the slice's first chunk.
    """
    dZ = np.asarray(dZ, float)
    M, N = dZ.shape
    V = np.empty((M, N + 1))
    xi0 = params.xi0(grid.times)
    V[:, 0] = xi0[0]
    if params.nu == 0:
        V[:, 1:] = xi0[1:]
        return V
    cov = cov or VolterraCovariance(params, grid)
    for c, lo, hi in _chunks(M):
        xi_z = dZ[lo:hi] / math.sqrt(grid.dt)
        xi_g = _volterra_normals(seed, c + chunk_offset, hi - lo, N)
        G = cov.sample(xi_z, xi_g)
        V[lo:hi, 1:] = xi0[1:] * np.exp(G - 0.5 * cov.var_g)
    return V


def _volterra_normals(seed, chunk, size, N):
    out = np.empty((size, N))
    for i in range(N):
        out[:, i] = normal_stream(seed, _VOLTERRA, i, chunk, size)
    return out


# ---------------------------------------------------------------------------
# Two-factor Bergomi
# ---------------------------------------------------------------------------


class _OUBlock:
    """Per-step joint law of OU integrals ``I_k = int e^{-kappa_k (t_i - s)} dB^k_s`` and
    increments ``dB``, with ``corr(B^j, B^k) = corr[j, k]``."""

    def __init__(self, kappas, corr, dt):
        self.kappas = np.asarray(kappas, float)
        corr = np.asarray(corr, float)
        k = self.kappas
        self.b = (1 - np.exp(-k * dt)) / k  # cov(dB_k, I_k)
        ksum = k[:, None] + k[None, :]
        cov_ii = corr * (1 - np.exp(-ksum * dt)) / ksum
        # cov(I_j, dB_l) = corr[j, l] b_j, proportional to cov(dB_j, dB_l): regression on own increment
        self.load = self.b / dt
        resid = cov_ii - np.outer(self.b, self.b) * corr / dt
        self.resid_chol = psd_cholesky(resid)
        self.cov_ii = cov_ii
        self.decay = np.exp(-k * dt)


def bergomi2f_variance_path(params: Bergomi2FParams, dX, dY, grid: TimeGrid, seed=0, chunk_offset=0):
    """Two-factor Bergomi variance with exact OU transitions; returns ``(V, x, y)``."""
    dX = np.asarray(dX, float)
    dY = np.asarray(dY, float)
    M, N = dX.shape
    blk = _OUBlock((params.kappa_x, params.kappa_y), [[1, params.rho_xy], [params.rho_xy, 1]], grid.dt)
    x = np.zeros((M, N + 1))
    y = np.zeros((M, N + 1))
    for c, lo, hi in _chunks(M):
        for i in range(N):
            eta = np.stack(
                [normal_stream(seed, _OU_RESID + 10 * j, i, c + chunk_offset, hi - lo) for j in range(2)], axis=1
            )
            res = eta @ blk.resid_chol.T
            x[lo:hi, i + 1] = blk.decay[0] * x[lo:hi, i] + blk.load[0] * dX[lo:hi, i] + res[:, 0]
            y[lo:hi, i + 1] = blk.decay[1] * y[lo:hi, i] + blk.load[1] * dY[lo:hi, i] + res[:, 1]
    V = _bergomi2f_variance(params, grid, x, y)
    return V, x, y


def _bergomi2f_var_factor(params, t):
    kx, ky, rho, th = params.kappa_x, params.kappa_y, params.rho_xy, params.theta
    vx = (1 - np.exp(-2 * kx * t)) / (2 * kx)
    vy = (1 - np.exp(-2 * ky * t)) / (2 * ky)
    cxy = rho * (1 - np.exp(-(kx + ky) * t)) / (kx + ky)
    return (1 - th) ** 2 * vx + th**2 * vy + 2 * th * (1 - th) * cxy


def _bergomi2f_variance(params, grid, x, y):
    t = grid.times
    s = params.nu * params.alpha_theta
    var = s * s * _bergomi2f_var_factor(params, t)
    mix = (1 - params.theta) * x + params.theta * y
    return params.xi0(t) * np.exp(s * mix - 0.5 * var)


# ---------------------------------------------------------------------------
# Vasicek
# ---------------------------------------------------------------------------


def vasicek_path(params: VasicekParams, dY, grid: TimeGrid, seed=0, chunk_offset=0):
    """Exact OU short rate and piecewise-constant discount factor.

    Returns ``(r, D)``, each ``(particles, N + 1)``, with
    ``D(t_i) = exp(-sum_{k<i} r_{t_k} dt)``.
    """
    dY = np.asarray(dY, float)
    M, N = dY.shape
    k, s, dt = params.kappa, params.sigma, grid.dt
    e = math.exp(-k * dt)
    b = (1 - e) / k
    load = b / dt
    resid = math.sqrt(max((1 - e * e) / (2 * k) - b * b / dt, 0.0))
    mean_step = params.long_run_mean * (1 - e)
    r = np.empty((M, N + 1))
    r[:, 0] = params.r_init
    for c, lo, hi in _chunks(M):
        for i in range(N):
            innov = load * dY[lo:hi, i]
            if s > 0 and resid > 0:
                innov = innov + resid * normal_stream(seed, _RATE_RESID, i, c + chunk_offset, hi - lo)
            r[lo:hi, i + 1] = e * r[lo:hi, i] + mean_step + s * innov
    D = np.ones((M, N + 1))
    D[:, 1:] = np.exp(-dt * np.cumsum(r[:, :-1], axis=1))
    return r, D


# ---------------------------------------------------------------------------
# Hybrid models and particle paths
# ---------------------------------------------------------------------------


@dataclass
class ConditionalLognormalParams:
    """Law of ``log V_{t_i}`` given the simulated past up to ``t_{i-1}``.

    ``xi_tilde`` is per particle; ``nu_tilde`` and ``rho`` are shared. ``xi`` and
    ``nu`` are the unconditional moments.
    """

    xi_tilde: np.ndarray
    nu_tilde: float
    rho: float
    xi: float
    nu: float


@dataclass
class ParticlePaths:
    """Simulated ``(V, r, D, dW_par)`` for an ensemble; the spot's own noise is
    drawn on demand with :meth:`spot_noise`."""

    grid: TimeGrid
    seed: int
    V: np.ndarray
    r: np.ndarray
    D: np.ndarray
    dw_par: np.ndarray
    rho_hat2: float
    xi_tilde: np.ndarray | None = None
    nu_tilde: np.ndarray | None = None
    rho_cond: np.ndarray | None = None
    xi_uncond: np.ndarray | None = None
    nu_uncond: np.ndarray | None = None

    @property
    def n_particles(self):
        return self.V.shape[0]

    def spot_noise(self, step):
        """Standard normals of the spot driver orthogonal to ``Z`` for ``step``."""
        return _spot_noise(self.seed, step, self.n_particles)

    def dW(self, step):
        perp = math.sqrt(max(1 - self.rho_hat2, 0.0) * self.grid.dt)
        return self.dw_par[:, step] + perp * self.spot_noise(step)


class HybridModel:
    """Base class: spot with leverage on top of a lognormal variance and Vasicek rates."""

    spot: float
    rates: VasicekParams
    lognormal = True

    @property
    def correlation(self) -> CorrelationStructure:
        raise NotImplementedError

    @property
    def v0(self):
        raise NotImplementedError

    @property
    def deterministic_rates(self):
        return self.rates.sigma == 0

    def _rate_index(self):
        return self.correlation.n - 1

    def simulate(self, grid: TimeGrid, n_particles, seed=0, lognormal=False, threads=1) -> ParticlePaths:
        raise NotImplementedError

    def _alloc(self, grid, M, lognormal):
        N = grid.n_steps
        out = dict(
            V=np.empty((M, N + 1)),
            r=np.empty((M, N + 1)),
            D=np.empty((M, N + 1)),
            dw_par=np.empty((M, N)),
        )
        if lognormal:
            out["xi_tilde"] = np.empty((M, N))
        return out


def _rate_corr_vector(rates, n_vol):
    rz = rates.rho_zy
    if np.ndim(rz) == 0:
        rz = (float(rz),) + (0.0,) * (n_vol - 1)
    rz = tuple(float(x) for x in rz)
    if len(rz) != n_vol:
        raise ModelError(f"rho_zy needs {n_vol} entries")
    return rz


@dataclass
class RoughBergomiVasicek(HybridModel):
    """Tempered rough Bergomi variance with Vasicek rates.

    Drivers ``Z = (Z_vol, Y_rate)``; ``rho_wz`` is the spot/variance correlation.
    """

    spot: float = 100.0
    rough: RoughVolParams = field(default_factory=RoughVolParams)
    rates: VasicekParams = field(default_factory=VasicekParams)
    rho_wz: float = -0.8

    def __post_init__(self):
        check_positive(self.spot, "spot")
        check_in_range(self.rho_wz, "rho_wz", -1.0, 1.0)
        (rzy,) = _rate_corr_vector(self.rates, 1)
        self._cs = CorrelationStructure((self.rho_wz, self.rates.rho_wy), ((1.0, rzy), (rzy, 1.0)))
        self._cov_cache = {}

    @property
    def correlation(self):
        return self._cs

    @property
    def v0(self):
        return float(self.rough.xi0(0.0))

    def volterra(self, grid):
        key = (grid.dt, grid.n_steps)
        if key not in self._cov_cache:
            self._cov_cache.clear()
            self._cov_cache[key] = VolterraCovariance(self.rough, grid)
        return self._cov_cache[key]

    def simulate(self, grid, n_particles, seed=0, lognormal=False, threads=1):
        M = check_int(n_particles, "n_particles", 1)
        cs = self._cs
        p = self.rough
        cov = self.volterra(grid) if p.nu > 0 else None
        xi0 = p.xi0(grid.times)
        out = self._alloc(grid, M, lognormal)

        def work(c, lo, hi):
            dZ = _chunk_dz(cs, grid, seed, c, hi - lo)
            out["dw_par"][lo:hi] = dZ @ cs.projection
            r, D = vasicek_path(self.rates, dZ[:, :, 1], grid, seed, chunk_offset=c)
            out["r"][lo:hi] = r
            out["D"][lo:hi] = D
            V = out["V"]
            V[lo:hi, 0] = xi0[0]
            if cov is None:
                V[lo:hi, 1:] = xi0[1:]
                if lognormal:
                    out["xi_tilde"][lo:hi] = np.log(xi0[1:])
                return
            xi_z = dZ[:, :, 0] / math.sqrt(grid.dt)
            xi_g = _volterra_normals(seed, c, hi - lo, grid.n_steps)
            G = cov.sample(xi_z, xi_g)
            V[lo:hi, 1:] = xi0[1:] * np.exp(G - 0.5 * cov.var_g)
            if lognormal:
                out["xi_tilde"][lo:hi] = np.log(xi0[1:]) - 0.5 * cov.var_g + cov.conditional_mean(G, xi_z, xi_g)

        _run_chunks(work, M, threads)
        N = grid.n_steps
        if cov is None:
            nu_t = np.zeros(N)
            rho_c = np.zeros(N)
            var_g = np.zeros(N)
        else:
            nu_t = cov.nu_tilde
            with np.errstate(invalid="ignore", divide="ignore"):
                rho_c = np.where(nu_t > 0, self.rho_wz * cov.lzz / np.sqrt(nu_t), 0.0)
            var_g = cov.var_g
        return ParticlePaths(
            grid,
            seed,
            rho_hat2=cs.rho_hat2,
            nu_tilde=nu_t,
            rho_cond=rho_c,
            xi_uncond=np.log(xi0[1:]) - 0.5 * var_g,
            nu_uncond=var_g,
            **out,
        )


@dataclass
class Bergomi2FVasicek(HybridModel):
    """Two-factor Bergomi variance with Vasicek rates; drivers ``Z = (X, Y, R)``."""

    spot: float = 100.0
    bergomi: Bergomi2FParams = field(default_factory=Bergomi2FParams)
    rates: VasicekParams = field(default_factory=VasicekParams)

    def __post_init__(self):
        check_positive(self.spot, "spot")
        b = self.bergomi
        rxr, ryr = _rate_corr_vector(self.rates, 2)
        self._cs = CorrelationStructure(
            (b.rho_wx, b.rho_wy, self.rates.rho_wy),
            ((1.0, b.rho_xy, rxr), (b.rho_xy, 1.0, ryr), (rxr, ryr, 1.0)),
        )

    @property
    def correlation(self):
        return self._cs

    @property
    def v0(self):
        return float(self.bergomi.xi0(0.0))

    def simulate(self, grid, n_particles, seed=0, lognormal=False, threads=1):
        M = check_int(n_particles, "n_particles", 1)
        cs = self._cs
        p = self.bergomi
        out = self._alloc(grid, M, lognormal)
        s = p.nu * p.alpha_theta
        var = s * s * _bergomi2f_var_factor(p, grid.times)
        blk = _OUBlock((p.kappa_x, p.kappa_y), [[1, p.rho_xy], [p.rho_xy, 1]], grid.dt)
        xi0 = p.xi0(grid.times)

        def work(c, lo, hi):
            dZ = _chunk_dz(cs, grid, seed, c, hi - lo)
            out["dw_par"][lo:hi] = dZ @ cs.projection
            r, D = vasicek_path(self.rates, dZ[:, :, 2], grid, seed, chunk_offset=c)
            out["r"][lo:hi] = r
            out["D"][lo:hi] = D
            V, x, y = bergomi2f_variance_path(p, dZ[:, :, 0], dZ[:, :, 1], grid, seed, chunk_offset=c)
            out["V"][lo:hi] = V
            if lognormal:
                mix_prev = (1 - p.theta) * blk.decay[0] * x[:, :-1] + p.theta * blk.decay[1] * y[:, :-1]
                out["xi_tilde"][lo:hi] = np.log(xi0[1:]) - 0.5 * var[1:] + s * mix_prev

        _run_chunks(work, M, threads)
        N = grid.n_steps
        w = np.array([1 - p.theta, p.theta])
        nu_t = s * s * float(w @ blk.cov_ii @ w)
        cov_w = s * float((1 - p.theta) * p.rho_wx * blk.b[0] + p.theta * p.rho_wy * blk.b[1])
        rho_c = cov_w / math.sqrt(grid.dt * nu_t) if nu_t > 0 else 0.0
        return ParticlePaths(
            grid,
            seed,
            rho_hat2=cs.rho_hat2,
            nu_tilde=np.full(N, nu_t),
            rho_cond=np.full(N, rho_c),
            xi_uncond=np.log(xi0[1:]) - 0.5 * var[1:],
            nu_uncond=var[1:],
            **out,
        )


def conditional_lognormal_params(model: HybridModel, step, paths: ParticlePaths) -> ConditionalLognormalParams:
    """Conditional law of ``log V`` at the end of ``step`` (0-based interval index)."""
    if not getattr(model, "lognormal", False):
        raise ModelError(f"{type(model).__name__} has no lognormal variance")
    if paths.xi_tilde is None:
        raise ModelError("paths were simulated without lognormal statistics")
    return ConditionalLognormalParams(
        xi_tilde=paths.xi_tilde[:, step],
        nu_tilde=float(paths.nu_tilde[step]),
        rho=float(paths.rho_cond[step]),
        xi=float(paths.xi_uncond[step]),
        nu=float(paths.nu_uncond[step]),
    )
