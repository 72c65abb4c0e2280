"""Malware propagation over device-to-device contacts on Poisson-Voronoi street maps.

Modules: ``street_system`` (maps), ``point_process`` (device placement),
``mobility`` (random-waypoint motion), ``infection`` (SI engine),
``metrics`` (propagation speed and infection rate), ``meanfield`` (simplified
model and analytic bounds) and ``harness`` (runs, sweeps, CSV output).
"""

from __future__ import annotations

from .errors import SimulationError
from .harness import ParameterSet, SweepSpec, run_simulation, run_sweep
from .infection import SimState, step
from .metrics import RunResult, infection_rate, propagation_speed
from .street_system import StreetPoint, StreetSystem, generate_street_system

__version__ = "0.1.0"

__all__ = [
    "ParameterSet",
    "RunResult",
    "SimState",
    "SimulationError",
    "StreetPoint",
    "StreetSystem",
    "SweepSpec",
    "generate_street_system",
    "infection_rate",
    "propagation_speed",
    "run_simulation",
    "run_sweep",
    "step",
]
