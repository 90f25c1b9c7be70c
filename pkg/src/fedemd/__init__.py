"""Clustered federated learning that groups clients by the earth mover's
distance between their embedding distributions."""

from .autonet import EmbeddingMLPClassifier, ModelParams, TrainConfig
from .federation import EMDClusteredFL, FederationConfig, run_baseline, run_experiment
from .metrics import accuracy_summary, ari, distance_diagnostics
from .projection import PairwiseProjection
from .synthdata import make_backdoor_partition, make_rotated_clusters
from .transport import DiscreteDistribution, emd_exact, sinkhorn

__all__ = [
    "DiscreteDistribution",
    "EMDClusteredFL",
    "EmbeddingMLPClassifier",
    "FederationConfig",
    "ModelParams",
    "PairwiseProjection",
    "TrainConfig",
    "accuracy_summary",
    "ari",
    "distance_diagnostics",
    "emd_exact",
    "make_backdoor_partition",
    "make_rotated_clusters",
    "run_baseline",
    "run_experiment",
    "sinkhorn",
]

__version__ = "0.1.0"
