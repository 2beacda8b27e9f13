"""Hoyer-family sparsity regularizers and a prune-and-finetune pipeline for LeNets."""

from .config import ConfigError, ExperimentConfig, load_config
from .estimator import HoyerSparseClassifier
from .metrics import SparsityReport, flops, sparsity_report, surviving_structure
from .model import Network, build_network, load_checkpoint, save_checkpoint
from .optim import ObjectiveSpec, composite_gradient, elementwise_objective, structural_objective, train_epochs
from .pruning import run_pipeline
from .regularizers import GroupScheme, RegularizerSpec, gradient, hoyer_measure, trimming_threshold, value

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "HoyerSparseClassifier",
    "SparsityReport",
    "flops",
    "sparsity_report",
    "surviving_structure",
    "Network",
    "build_network",
    "load_checkpoint",
    "save_checkpoint",
    "ObjectiveSpec",
    "composite_gradient",
    "elementwise_objective",
    "structural_objective",
    "train_epochs",
    "run_pipeline",
    "GroupScheme",
    "RegularizerSpec",
    "gradient",
    "hoyer_measure",
    "trimming_threshold",
    "value",
]
