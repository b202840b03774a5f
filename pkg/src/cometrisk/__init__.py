"""Agent-based Monte Carlo risk engine for a Comet-style lending market."""

from .engine import Scenario, estimate_lar, estimate_var, run_path, run_round
from .errors import CometRiskError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "CometRiskError",
    "Scenario",
    "ValidationError",
    "estimate_lar",
    "estimate_var",
    "run_path",
    "run_round",
]
