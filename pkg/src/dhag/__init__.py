"""Anomaly detection on tabular data with learned, diversified latent perturbations."""

from .core import (
    ArchConfig,
    DhagModel,
    LossReport,
    TrainConfig,
    anomaly_score,
    assign_pseudo_labels,
    build_model,
    classify,
    fit,
)
from .data import Dataset, SplitSpec, load_csv, load_manifest_dataset, split, synthetic_two_gaussian
from .estimator import DHAGDetector
from .exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DhagError,
    DimensionError,
    LabelError,
    MetricError,
    NonFiniteError,
    StateError,
)
from .metrics import MetricReport, auc, evaluate, f1_at_contamination, multi_seed

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "CheckpointError",
    "ConfigError",
    "DHAGDetector",
    "DataError",
    "Dataset",
    "DhagError",
    "DhagModel",
    "DimensionError",
    "LabelError",
    "LossReport",
    "MetricError",
    "MetricReport",
    "NonFiniteError",
    "SplitSpec",
    "StateError",
    "TrainConfig",
    "anomaly_score",
    "assign_pseudo_labels",
    "auc",
    "build_model",
    "classify",
    "evaluate",
    "f1_at_contamination",
    "fit",
    "load_csv",
    "load_manifest_dataset",
    "multi_seed",
    "split",
    "synthetic_two_gaussian",
]
