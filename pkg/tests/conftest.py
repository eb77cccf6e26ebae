import numpy as np
import pytest

from lsvcal.market_data import DiscountCurve, SyntheticSurfaceSpec, synthesize_surface
from lsvcal.models import ForwardVariance, RoughBergomiVasicek, RoughVolParams, VasicekParams

SPOT = 100.0


def vasicek_curve(rates, horizon=5.0, n=501):
    t = np.linspace(0.0, horizon, n)
    return DiscountCurve(t, rates.zcb(t))


@pytest.fixture
def rates():
    return VasicekParams(kappa=1.0, sigma=0.005, r0=0.015)


@pytest.fixture
def curve(rates):
    return vasicek_curve(rates)


@pytest.fixture
def skew_spec():
    return SyntheticSurfaceSpec.from_ssvi((0.25, 0.5, 1.0, 2.0), atm_vol=0.2, rho=-0.6, eta=1.0, gamma=0.4)


@pytest.fixture
def skew_surface(skew_spec, curve):
    return synthesize_surface(skew_spec, curve)


@pytest.fixture
def flat_spec():
    # zero skew and curvature: w(k) = 0.04 T
    return SyntheticSurfaceSpec((0.5, 1.0, 2.0), tuple((0.04 * T, 0.0, 0.0, 0.0, 1.0) for T in (0.5, 1.0, 2.0)))


@pytest.fixture
def rough_model(rates):
    return RoughBergomiVasicek(rough=RoughVolParams(nu=2.0, xi0=ForwardVariance.flat(0.04)), rates=rates)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
