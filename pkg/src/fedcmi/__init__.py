"""Balanced multimodal federated learning with cross-modal infiltration."""

from .data import Availability, DataSpec, MultimodalDataset, build_assignment, generate_dataset
from .experiment import ExperimentConfig, compare, load_config, run_experiment
from .federation import FedConfig, run_federation
from .metrics import RoundMetrics, evaluate
from .model import ArchConfig, ModelParams, init_model

__all__ = [
    "ArchConfig",
    "Availability",
    "DataSpec",
    "ExperimentConfig",
    "FedConfig",
    "ModelParams",
    "MultimodalDataset",
    "RoundMetrics",
    "build_assignment",
    "compare",
    "evaluate",
    "generate_dataset",
    "init_model",
    "load_config",
    "run_experiment",
    "run_federation",
]
