"""Seeded discrete-event simulation of the coded and TCP transfer protocols."""

from .engine import SimulationAborted, run
from .loss import LossModel, LossProcess, RateTrajectory, hmm_step
from .scenario import (
    AdaptiveDeadline,
    AdaptiveErrorBound,
    Scenario,
    ScenarioError,
    SimReport,
    StaticEC,
    TcpBaseline,
    load_scenarios,
    scenarios_from_dict,
)

__all__ = [
    "AdaptiveDeadline",
    "AdaptiveErrorBound",
    "LossModel",
    "LossProcess",
    "RateTrajectory",
    "Scenario",
    "ScenarioError",
    "SimReport",
    "SimulationAborted",
    "StaticEC",
    "TcpBaseline",
    "hmm_step",
    "load_scenarios",
    "run",
    "scenarios_from_dict",
]
