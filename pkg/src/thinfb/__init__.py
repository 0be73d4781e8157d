"""Numerical laboratory for the weighted parabolic thin obstacle problem."""
from .kernels import DomainError, KernelEvalPolicy, WeightParam
from .polys import ParabolicPolynomial

__all__ = ["DomainError", "KernelEvalPolicy", "ParabolicPolynomial", "WeightParam"]
__version__ = "0.1.0"
