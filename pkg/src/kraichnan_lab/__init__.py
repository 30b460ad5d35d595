"""Simulation and verification lab for passive scalars in white-in-time Gaussian velocity fields."""
from .covariance import ConfigurationError, CovarianceSpec
from .fieldsynth import Environment, FieldIncrement, Grid
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "ConfigurationError", "CovarianceSpec", "Environment", "FieldIncrement", "Grid", "__version__"]
