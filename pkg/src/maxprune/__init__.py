"""
maxprune – maxout neuron pruning and magnitude weight pruning for LeNet-5 on MNIST.
Version: 0.1.0
"""

__version__ = "0.1.0"

from .config import RunConfig, TrainConfig, load_run_config
from .dataio import DatasetHandle, EmbeddingPairs, load_embeddings, load_idx, load_mnist
from .errors import (
    ArgumentError,
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    MaxPruneError,
    StructureError,
    UsageError,
)
from .metrics import bray_curtis, eer, far_frr, randomization_test
from .network import MaxoutState, Network, NetworkSpec, baseline_of, lenet_spec
from .persist import ExperimentRecord, load_checkpoint, save_checkpoint, write_report
from .pruning import (
    ParamAccount,
    WinnerCounts,
    count_winners,
    iterative_neuron_prune,
    param_account,
    prune_least_active,
    prune_weights,
    sweep_weight_pruning,
    threshold_for_fraction,
)
from .trainer import evaluate, train

__all__ = [
    "RunConfig",
    "TrainConfig",
    "load_run_config",
    "DatasetHandle",
    "EmbeddingPairs",
    "load_embeddings",
    "load_idx",
    "load_mnist",
    "ArgumentError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "FormatError",
    "MaxPruneError",
    "StructureError",
    "UsageError",
    "bray_curtis",
    "eer",
    "far_frr",
    "randomization_test",
    "MaxoutState",
    "Network",
    "NetworkSpec",
    "baseline_of",
    "lenet_spec",
    "ExperimentRecord",
    "load_checkpoint",
    "save_checkpoint",
    "write_report",
    "ParamAccount",
    "WinnerCounts",
    "count_winners",
    "iterative_neuron_prune",
    "param_account",
    "prune_least_active",
    "prune_weights",
    "sweep_weight_pruning",
    "threshold_for_fraction",
    "evaluate",
    "train",
]
