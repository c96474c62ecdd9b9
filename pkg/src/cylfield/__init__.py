"""Electromagnetic fields of point dipoles in cylindrically layered media."""

from .integrand import Dipole
from .medium import INCH, Layer, LayerStack, stack_from_resistivities
from .solver import FieldResult, JobConfig, compute_fields, relative_error_db

__all__ = [
    "Dipole",
    "FieldResult",
    "INCH",
    "JobConfig",
    "Layer",
    "LayerStack",
    "compute_fields",
    "relative_error_db",
    "stack_from_resistivities",
]
