"""Numerical lab for the logarithmic L^p stability estimate of regular Lagrangian flows."""
from .errors import (
    ConfigurationError,
    DegenerateRadiusError,
    IncompatibleEnsemblesError,
    IntegrationDivergedError,
    InvalidDeltaError,
    InvalidInputError,
    LogSignError,
    RLFLabError,
    UnsupportedExponentError,
)
from .params import ExperimentParams

__version__ = "0.1.0"
