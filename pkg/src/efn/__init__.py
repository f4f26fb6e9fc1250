"""Exponential family networks: one density network per family, indexed by eta."""

from efn.autodiff import NumericalError
from efn.estimators import ExponentialFamilyNetwork, NormalizingFlow
from efn.families import (
    Dirichlet,
    HierarchicalDirichlet,
    LogGaussianPoisson,
    MultivariateNormal,
    family_from_spec,
)
from efn.training import EFNModel, NFModel, TrainConfig, checkpoint_load, checkpoint_save, train

__all__ = [
    "Dirichlet",
    "EFNModel",
    "ExponentialFamilyNetwork",
    "HierarchicalDirichlet",
    "LogGaussianPoisson",
    "MultivariateNormal",
    "NFModel",
    "NormalizingFlow",
    "NumericalError",
    "TrainConfig",
    "checkpoint_load",
    "checkpoint_save",
    "family_from_spec",
    "train",
]

__version__ = "0.1.0"
