"""Decentralized Stackelberg-Nash-Cournot strategies for a linear-quadratic
mean-field game with a major leader, minor leaders and followers."""

from .errors import BreakdownError, ConfigError, NumericalError, SolverError, ValidationError
from .meanfield import Equilibrium, solve_equilibrium
from .model import InitialLaw, ModelParams, ScenarioConfig, example51_scenario

__version__ = "0.1.0"

__all__ = [
    "BreakdownError", "ConfigError", "NumericalError", "SolverError", "ValidationError",
    "Equilibrium", "solve_equilibrium", "InitialLaw", "ModelParams", "ScenarioConfig",
    "example51_scenario",
]
