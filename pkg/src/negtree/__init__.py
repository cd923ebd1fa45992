"""Dynamic tree-structured indexes for bias-reduced negative sampling.

A library plus experiment CLI for training dual-encoder retrieval models:
hierarchical-clustering-quantized softmax proposals, exact rejection and
Metropolis-Hastings samplers, drift-bounded tree repair, and low-rank
approximate re-encoding, all validated at desk scale against a brute-force
softmax oracle.
"""

__version__ = "0.1.0"

from .core import (
    DualEncoder,
    LinearEncoder,
    MLPEncoder,
    SoftmaxParams,
    TargetStore,
    exact_loss_and_grad,
    exact_softmax,
    logit,
    sampled_loss_and_grad,
)
from .sgtree import EuclideanMetric, SGForest, build_forest, verify_invariants

__all__ = [
    "DualEncoder",
    "EuclideanMetric",
    "LinearEncoder",
    "MLPEncoder",
    "SGForest",
    "SoftmaxParams",
    "TargetStore",
    "build_forest",
    "exact_loss_and_grad",
    "exact_softmax",
    "logit",
    "sampled_loss_and_grad",
    "verify_invariants",
]
