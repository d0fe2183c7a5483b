"""Discrete-event simulation of a PoI network with faults and adversaries."""

from .config import AdversaryConfig, ConfigError, FaultSpec, SimConfig
from .engine import SimResult, Simulation, run
from .metrics import Metrics

__all__ = [
    "AdversaryConfig",
    "ConfigError",
    "FaultSpec",
    "Metrics",
    "SimConfig",
    "SimResult",
    "Simulation",
    "run",
]
