"""Manifold Gaussian process latent variable models."""

from .manifold import (
    SO3,
    Euclidean,
    Manifold,
    Product,
    Sphere2,
    Sphere3,
    Torus,
    parse_manifold,
)
from .model import Dataset, MGplvmModel
from .train import FitConfig, build_model, fit

__all__ = [
    "SO3",
    "Dataset",
    "Euclidean",
    "FitConfig",
    "MGplvmModel",
    "Manifold",
    "Product",
    "Sphere2",
    "Sphere3",
    "Torus",
    "build_model",
    "fit",
    "parse_manifold",
]
