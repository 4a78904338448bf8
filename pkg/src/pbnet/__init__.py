"""Unrolled proximal-gradient networks with memory-efficient gradients.

The package builds physics-based networks from composable linear operators
and differentiates them three ways: standard stored-state backpropagation,
reverse recalculation through layer inverses, and a hybrid that resets the
recalculation at stored checkpoints.
"""

from .config import ExperimentConfig, load
from .engines import backprop, backprop_hybrid, backprop_memory_efficient, backprop_standard, policy_for
from .fixed_point import FixedPointConfig, check_contraction, fixed_point_solve
from .layers import GradientLayer, InvertibleResidualLayer, QuadraticProxLayer, SmoothProxLayer
from .network import Network, StoragePolicy, certify_invertible, forward
from .training import train

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "FixedPointConfig",
    "GradientLayer",
    "InvertibleResidualLayer",
    "Network",
    "QuadraticProxLayer",
    "SmoothProxLayer",
    "StoragePolicy",
    "backprop",
    "backprop_hybrid",
    "backprop_memory_efficient",
    "backprop_standard",
    "certify_invertible",
    "check_contraction",
    "fixed_point_solve",
    "forward",
    "load",
    "policy_for",
    "train",
]
