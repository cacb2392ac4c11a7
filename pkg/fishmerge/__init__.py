"""Merge classifiers by Fisher-weighted parameter averaging."""

__version__ = "0.1.0"

from .checkpoint import ParameterSet, check_merge_compatibility, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointFormatError,
    CompatibilityError,
    ConfigError,
    DataFormatError,
    FishMergeError,
    NumericalError,
    SweepError,
)
from .fisher import FisherConfig, FisherDiagonal, estimate_fisher, load_fisher, save_fisher
from .merging import MergeInput, MergeReport, MergeSpec, merge, merge_fisher, merge_isotropic, merge_objective
from .models import LabeledDataset, ModelSpec, evaluate, forward, init_params, per_example_grad
from .training import TrainConfig, finetune, make_task_suite, train

__all__ = [
    "CheckpointFormatError",
    "CompatibilityError",
    "ConfigError",
    "DataFormatError",
    "FishMergeError",
    "FisherConfig",
    "FisherDiagonal",
    "LabeledDataset",
    "MergeInput",
    "MergeReport",
    "MergeSpec",
    "ModelSpec",
    "NumericalError",
    "ParameterSet",
    "SweepError",
    "TrainConfig",
    "check_merge_compatibility",
    "estimate_fisher",
    "evaluate",
    "finetune",
    "forward",
    "init_params",
    "load_checkpoint",
    "load_fisher",
    "make_task_suite",
    "merge",
    "merge_fisher",
    "merge_isotropic",
    "merge_objective",
    "per_example_grad",
    "save_checkpoint",
    "save_fisher",
    "train",
]
