"""Sparse factor models of a covariance matrix with SCAD/MCP-penalised loadings."""

from .model import DataSet, FactorParams, assemble_sigma, sample_covariance
from .penalties import Family, PenaltySpec
from .losses import LossKind
from .estimator import EstimatorConfig, FitResult, fit_sparse

__version__ = "0.1.0"

__all__ = [
    "DataSet",
    "EstimatorConfig",
    "FactorParams",
    "Family",
    "FitResult",
    "LossKind",
    "PenaltySpec",
    "assemble_sigma",
    "fit_sparse",
    "sample_covariance",
]
