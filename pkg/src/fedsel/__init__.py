"""Deterministic federated-learning simulator for comparing client-selection strategies."""

from .cluster import AgglomerativeClusterer, agglomerative, cut_k, grid_search, pairwise_distances, silhouette
from .config import ExperimentConfig, parse_config
from .data import GeneratorParams, PartitionSpec, generate, load_partition_spec
from .model import LinearSoftmaxModel, SoftmaxRegression
from .selection import StrategyConfig
from .simulation import ExperimentResult, RoundRecord, Simulation, run
from .training import SgdParams, fedavg, local_train

__version__ = "0.1.0"

__all__ = [
    "AgglomerativeClusterer",
    "ExperimentConfig",
    "ExperimentResult",
    "GeneratorParams",
    "LinearSoftmaxModel",
    "PartitionSpec",
    "RoundRecord",
    "SgdParams",
    "Simulation",
    "SoftmaxRegression",
    "StrategyConfig",
    "agglomerative",
    "cut_k",
    "fedavg",
    "generate",
    "grid_search",
    "load_partition_spec",
    "local_train",
    "pairwise_distances",
    "parse_config",
    "run",
    "silhouette",
]
