"""Simulation and estimation lab for periodic asymmetric ranging networks.

Modules: ``clock_motion`` (clock random walk, motion), ``scenario``
(measurement synthesis), ``virtual_sync`` (anchor clock tracking),
``las_solver`` (joint localization and synchronization), ``analysis``
(bounds and deviation analysis) and ``harness`` (Monte Carlo presets).
"""
from ._kernels import BACKEND
from .clock_motion import C, REFERENCE_CLOCK_NOISE, ClockNoiseParams, ClockState
from .las_solver import MODE1, MODE2, GeometryError, LasEstimate, SolverInput, Theta, gauss_newton_solve
from .scenario import Scenario, reference_scene, simulate

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "C", "REFERENCE_CLOCK_NOISE", "ClockNoiseParams", "ClockState", "MODE1", "MODE2",
    "GeometryError", "LasEstimate", "SolverInput", "Theta", "gauss_newton_solve",
    "Scenario", "reference_scene", "simulate",
]
