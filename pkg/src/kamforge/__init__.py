"""Numerical KAM/Nash-Moser engine on truncated Fourier-Taylor vector fields."""

from .fields import (
    FourierTaylorField,
    Geometry,
    ModeSet,
    MonomialClass,
    NormParams,
    RegularField,
    field_norm,
    lie_bracket,
    project_monomial,
    regular_norm,
    scalar_norm,
    smoothing_project,
)

__all__ = [
    "FourierTaylorField",
    "Geometry",
    "ModeSet",
    "MonomialClass",
    "NormParams",
    "RegularField",
    "field_norm",
    "lie_bracket",
    "project_monomial",
    "regular_norm",
    "scalar_norm",
    "smoothing_project",
]
