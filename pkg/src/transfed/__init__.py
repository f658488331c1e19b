"""Lightweight one-patch transformer for human activity recognition,
trainable centrally or by synchronous federated averaging."""

from .data import (
    Dataset,
    PartitionSpec,
    RawSeries,
    load_own_csv,
    load_windows,
    load_wisdm,
    make_windows,
    partition_noniid,
    save_windows,
    split,
    synthetic_windows,
)
from .estimator import WindowTransformerClassifier
from .fedcore import (
    ClientUpdate,
    RoundConfig,
    TrainingHistory,
    evaluate,
    fedavg,
    local_round,
    run_simulation,
    train_centralized,
)
from .fednet import TlsConfig, run_client, serve
from .metrics import confusion, per_class, render_report
from .model import Model, ModelConfig, build, param_count
from .params import ParameterSet
from .wire import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ClientUpdate",
    "Dataset",
    "Model",
    "ModelConfig",
    "ParameterSet",
    "PartitionSpec",
    "RawSeries",
    "RoundConfig",
    "TlsConfig",
    "TrainingHistory",
    "WindowTransformerClassifier",
    "build",
    "confusion",
    "evaluate",
    "fedavg",
    "load_checkpoint",
    "load_own_csv",
    "load_windows",
    "load_wisdm",
    "local_round",
    "make_windows",
    "param_count",
    "partition_noniid",
    "per_class",
    "render_report",
    "run_client",
    "run_simulation",
    "save_checkpoint",
    "save_windows",
    "serve",
    "split",
    "synthetic_windows",
    "train_centralized",
]
