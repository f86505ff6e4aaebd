"""Affine and B-spline registration driven by normalized mutual information."""

from .affine import affine_register, params_to_matrix, symmetric_average
from .deformable import bending_energy, bspline_register, cost, refine_grid, register
from .params import RegistrationParams, RegistrationResult, gaussian_pyramid
from .similarity import (
    DegenerateRangeError,
    JointHistogram,
    ParzenNMI,
    entropy,
    histogram_from_values,
    joint_histogram,
    nmi,
)

__all__ = [
    "DegenerateRangeError",
    "JointHistogram",
    "ParzenNMI",
    "RegistrationParams",
    "RegistrationResult",
    "affine_register",
    "bending_energy",
    "bspline_register",
    "cost",
    "entropy",
    "gaussian_pyramid",
    "histogram_from_values",
    "joint_histogram",
    "nmi",
    "params_to_matrix",
    "refine_grid",
    "register",
    "symmetric_average",
]
