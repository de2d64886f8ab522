"""Ensemble Kalman inversion as a stochastic flow, with tamed and explicit discretisations."""

from .analysis import ConvergenceReport, error_process, estimate_moment, estimate_probability, fit_order
from .ensemble import Ensemble
from .model import ForwardModel, InverseProblem
from .noise import NoiseLattice, build_lattice
from .schemes import SchemeConfig, Trajectory, reference_path, simulate, step_em, step_tamed, step_teki

__version__ = "0.1.0"

__all__ = [
    "ConvergenceReport", "Ensemble", "ForwardModel", "InverseProblem", "NoiseLattice",
    "SchemeConfig", "Trajectory", "build_lattice", "error_process", "estimate_moment",
    "estimate_probability", "fit_order", "reference_path", "simulate", "step_em",
    "step_tamed", "step_teki", "__version__",
]
