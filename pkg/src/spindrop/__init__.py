"""Spatial-dropout binary Bayesian CNNs with a crossbar compute-in-memory simulator."""

from spindrop.errors import (
    ConfigurationError,
    DimensionError,
    DivergedTrainingError,
    FormatError,
    IllegalTransitionError,
    ParameterError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DimensionError",
    "DivergedTrainingError",
    "FormatError",
    "IllegalTransitionError",
    "ParameterError",
]
