"""Resilient multi-agent formation control.

Agents run a Kalman filter on their own sensors and a chi-square detector on
the residual. An agent whose detector latches switches to RSSI multilateration
against trusted neighbours and re-estimates its measurement noise covariance
online. Neighbours watch each other's broadcasts and drop flagged agents from
control and anchoring.
"""
from .config import ScenarioConfig, apply_overrides, load_config, validate
from .engine import Trace, World, formation_error, run_scenario
from .errors import (ConfigError, DimensionError, InsufficientAnchorsError,
                     InvalidParameterError, NumericalError, SingularGeometryError,
                     SwarmError)
from .montecarlo import MonteCarloSummary, monte_carlo

__all__ = [
    "ScenarioConfig", "load_config", "apply_overrides", "validate",
    "World", "Trace", "run_scenario", "formation_error",
    "MonteCarloSummary", "monte_carlo",
    "SwarmError", "InvalidParameterError", "DimensionError", "NumericalError",
    "InsufficientAnchorsError", "SingularGeometryError", "ConfigError",
]
__version__ = "0.1.0"
