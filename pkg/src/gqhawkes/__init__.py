"""Calibration, simulation and liquidity analysis of generalized quadratic Hawkes models.

Submodules
----------
ingest     order-book event streams, micro/surprise price, intraday clock
grids      quadrature time grids and discretized convolutions
moments    mergeable mean and covariance estimators
calibrate  full-route kernel solvers
effective  resolvent, effective kernels and the Zumbach decomposition
liquidity  effective spread, trend/volatility signals and liquidity flux
simulate   exponential-kernel thinning simulator
cli        file-based pipeline driver
"""
from .errors import ConfigError, DataError, GQHawkesError, NumericalError
from .ingest import EVENT_TYPES, KINDS
from .grids import TimeGrid, build_grid
from .moments import MomentSet, estimate_moments
from .calibrate import KernelSet, calibrate
from .effective import resolvent, zumbach_decompose
from .simulate import SimConfig, simulate

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "GQHawkesError", "NumericalError", "EVENT_TYPES", "KINDS",
    "TimeGrid", "build_grid", "MomentSet", "estimate_moments", "KernelSet", "calibrate",
    "resolvent", "zumbach_decompose", "SimConfig", "simulate", "__version__",
]
