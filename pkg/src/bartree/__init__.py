"""Simulation, least-squares estimation and Monte-Carlo verification for
bifurcating autoregressive processes indexed by a binary tree."""

from .estimate import EstimationResult, SingularDesign, estimate, theta_hat
from .limits import LimitSet, compute_limits
from .model import BarModel, InitSpec, SimulatedTree, UnstableModel, build_model, simulate
from .noise import NoiseModel, make_noise
from .tree import TreeShape

__all__ = [
    "BarModel", "EstimationResult", "InitSpec", "LimitSet", "NoiseModel", "SimulatedTree",
    "SingularDesign", "TreeShape", "UnstableModel", "build_model", "compute_limits", "estimate",
    "make_noise", "simulate", "theta_hat",
]
