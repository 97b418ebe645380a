"""Group federated learning simulator: FedAvg, HierFAVG and FedAvg-IC on a modeled network."""

from . import analysis, data, engine, grouping, harness, models, network
from .errors import (ConfigError, ConvergenceError, DivergenceError, DomainError, FormatError,
                     GroupFLError, InvariantError, ShapeError)

__version__ = "0.1.0"

__all__ = ["analysis", "data", "engine", "grouping", "harness", "models", "network", "ConfigError", "ConvergenceError",
           "DivergenceError", "DomainError", "FormatError", "GroupFLError", "InvariantError", "ShapeError"]
