"""Regularized anisotropic p-Laplace solver and estimate verification."""
from .norms import DomainError, Euclidean, PowerCombination, WeightedEuclidean, make_norm
from .operator import RegularizedOperator

__all__ = [
    "DomainError",
    "Euclidean",
    "PowerCombination",
    "WeightedEuclidean",
    "make_norm",
    "RegularizedOperator",
]
__version__ = "0.1.0"
