"""
Physics-informed neural network gravity models for small bodies, with the classical models they are measured
against: point mass, spherical harmonics, constant-density polyhedron, mascons and extreme learning machines.
"""

from .analytic import (
    HeterogeneousTruthModel,
    MasconModel,
    PointMassModel,
    PolyhedralModel,
    SphericalHarmonicModel,
    heterogeneous_truth,
)
from .bundles import load_bundle, save_bundle
from .geometry import ShapeModel, builtin_shape, load_shape
from .pinn import PinnModel, build_model
from .training import generate_dataset, train

__all__ = [
    "HeterogeneousTruthModel",
    "MasconModel",
    "PinnModel",
    "PointMassModel",
    "PolyhedralModel",
    "ShapeModel",
    "SphericalHarmonicModel",
    "build_model",
    "builtin_shape",
    "generate_dataset",
    "heterogeneous_truth",
    "load_bundle",
    "load_shape",
    "save_bundle",
    "train",
]
