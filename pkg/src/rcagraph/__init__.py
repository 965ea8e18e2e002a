"""Root-cause ranking for microservice incidents from metrics, logs and traces."""

from .crd import CRDConfig
from .dataset import validate_dataset, write_dataset
from .metrics import EvalReport, evaluate
from .model import ModelConfig, RCAModel
from .pipeline import (
    Checkpoint,
    DataConfig,
    TrainConfig,
    infer,
    run_ablation_suite,
    stratified_split,
    train,
    train_and_evaluate,
)
from .simgen import ScenarioConfig, emit_dataset

__version__ = "0.1.0"

__all__ = [
    "CRDConfig",
    "Checkpoint",
    "DataConfig",
    "EvalReport",
    "ModelConfig",
    "RCAModel",
    "ScenarioConfig",
    "TrainConfig",
    "emit_dataset",
    "evaluate",
    "infer",
    "run_ablation_suite",
    "stratified_split",
    "train",
    "train_and_evaluate",
    "validate_dataset",
    "write_dataset",
]
