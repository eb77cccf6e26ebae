"""Monte Carlo calibration of local-stochastic-volatility leverage functions
for hybrid rough-volatility and stochastic-rate models."""

from .calibration import CalibrationConfig, CalibrationError, LSVCalibrator, run_calibration
from .leverage import LeverageSurface
from .market_data import (
    DiscountCurve,
    ImpliedVolSurface,
    SVISurface,
    SyntheticSurfaceSpec,
    dupire_local_vol,
    load_curve,
    load_surface,
    synthesize_surface,
)
from .models import (
    Bergomi2FParams,
    Bergomi2FVasicek,
    ForwardVariance,
    RoughBergomiVasicek,
    RoughVolParams,
    TimeGrid,
    VasicekParams,
)
from .validation import implied_vol, price_european, reprice_report

__version__ = "0.1.0"

__all__ = [
    "Bergomi2FParams",
    "Bergomi2FVasicek",
    "CalibrationConfig",
    "CalibrationError",
    "DiscountCurve",
    "ForwardVariance",
    "ImpliedVolSurface",
    "LSVCalibrator",
    "LeverageSurface",
    "RoughBergomiVasicek",
    "RoughVolParams",
    "SVISurface",
    "SyntheticSurfaceSpec",
    "TimeGrid",
    "VasicekParams",
    "dupire_local_vol",
    "implied_vol",
    "load_curve",
    "load_surface",
    "price_european",
    "reprice_report",
    "run_calibration",
    "synthesize_surface",
]
