"""Open-set domain generalization with semantic-enhanced prompts.

The package splits into a frozen encoder backend, attention-pooled semantic
tokens, prompt assembly, the training objective, pseudo-unknown generation,
and an open-set evaluation harness. ``SeeCLIPClassifier`` wraps the lot in a
scikit-learn style estimator.
"""

from .backend import BackendSpec, ExternalBackend, SyntheticBackend, make_backend
from .data import (Dataset, LabeledSample, OSDGSplit, SyntheticSpec, build_losdo_splits,
                   make_synthetic_dataset)
from .estimator import SeeCLIPClassifier
from .evaluation import EvalReport, evaluate_split, h_score, lemma1_diagnostic, run_losdo_protocol
from .losses import LossWeights, total_loss
from .trainer import HyperParams, TrainState, checkpoint_load, checkpoint_save, train

__version__ = "0.1.0"

__all__ = [
    "BackendSpec", "Dataset", "EvalReport", "ExternalBackend", "HyperParams", "LabeledSample",
    "LossWeights", "OSDGSplit", "SeeCLIPClassifier", "SyntheticBackend", "SyntheticSpec", "TrainState",
    "build_losdo_splits", "checkpoint_load", "checkpoint_save", "evaluate_split", "h_score",
    "lemma1_diagnostic", "make_backend", "make_synthetic_dataset", "run_losdo_protocol", "total_loss",
    "train",
]
