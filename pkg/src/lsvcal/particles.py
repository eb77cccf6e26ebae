"""Spot particles diffused on top of pre-simulated variance and rate paths."""

from __future__ import annotations

import math

import numpy as np

from .estimators import ConditionalLawParams
from .models import ParticlePaths


class ParticleEnsemble:
    """Log-spot of every particle plus the simulation step it has reached.

    The leverage passed to :meth:`advance` is frozen over the advanced
    interval, which makes ``log S`` conditionally Gaussian given the variance
    and rate drivers.
    """

    def __init__(self, paths: ParticlePaths, spot, antithetic=False):
        self.paths = paths
        self.step = 0
        self.antithetic = antithetic
        self.log_s = np.full(paths.n_particles, math.log(spot))
        self.log_s_anti = self.log_s.copy() if antithetic else None

    @property
    def S(self):
        return np.exp(self.log_s)

    @property
    def t(self):
        return self.step * self.paths.grid.dt

    def advance(self, lam, n_steps, lam_anti=None) -> ConditionalLawParams:
        """Diffuse ``n_steps`` simulation steps; returns the interval's conditional law."""
        p = self.paths
        k0, k1 = self.step, self.step + n_steps
        if k1 > p.grid.n_steps:
            raise ValueError("advancing past the simulation horizon")
        dt = p.grid.dt
        perp = math.sqrt(max(1.0 - p.rho_hat2, 0.0) * dt)
        lam = np.asarray(lam, float)
        lam2 = lam * lam
        var_int = np.zeros_like(self.log_s)
        drift = np.zeros_like(self.log_s)
        par = np.zeros_like(self.log_s)
        noise = np.zeros_like(self.log_s)
        for k in range(k0, k1):
            sv = np.sqrt(p.V[:, k])
            xi = p.spot_noise(k)
            var_int += p.V[:, k] * dt
            drift += p.r[:, k] * dt
            par += sv * p.dw_par[:, k]
            noise += sv * xi
        sigma2 = lam2 * var_int
        mu_tilde = self.log_s + drift - 0.5 * sigma2
        mu = mu_tilde + lam * par
        if self.antithetic:
            # the antithetic particle flips only the spot's own noise
            lam_a = lam if lam_anti is None else np.asarray(lam_anti, float)
            sigma2_a = lam_a * lam_a * var_int
            mu_a = self.log_s_anti + drift - 0.5 * sigma2_a + lam_a * par
            self.log_s_anti = mu_a - perp * lam_a * noise
        self.log_s = mu + perp * lam * noise
        self.step = k1
        return ConditionalLawParams(mu, sigma2, p.rho_hat2, mu_tilde, n_steps)

    @property
    def D(self):
        return self.paths.D[:, self.step]

    @property
    def V(self):
        return self.paths.V[:, self.step]

    @property
    def r(self):
        return self.paths.r[:, self.step]
