"""Numerical laboratory for complex Gaussian multiplicative chaos."""

__version__ = "0.1.0"

from .chaos import ChaosParams, PhaseLabel, TestFunction, classify_phase, critical_p, renormalization_factor, zeta
from .fields import Grid, sample_exact_scale_invariant, sample_independent_pair, sample_star_field
from .kernels import CutoffSchedule, Kernel, gaussian, make_kernel, mff, sigma2, triangle

__all__ = [
    "ChaosParams",
    "CutoffSchedule",
    "Grid",
    "Kernel",
    "PhaseLabel",
    "TestFunction",
    "classify_phase",
    "critical_p",
    "gaussian",
    "make_kernel",
    "mff",
    "renormalization_factor",
    "sample_exact_scale_invariant",
    "sample_independent_pair",
    "sample_star_field",
    "sigma2",
    "triangle",
    "zeta",
]
