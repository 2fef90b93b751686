"""Quantum-inspired tensor-network models for binary sequence classification."""
from .data import Example, Vocabulary, build_vocab, load_dataset, majority_dataset, save_dataset
from .errors import (ArgumentError, CheckpointError, ContractionSizeError, DataError, DegenerateStateError,
                     DimensionError, ParseError, TnseqError)
from .evaluator import (Model, ModelConfig, contraction_cost, forward, forward_batch, forward_ctns,
                        init_parameters, model_keys)
from .schemes import build_scheme, count_parameters, merge_schedule, parse_tree_from_text, sharing_key
from .training import TrainConfig, bce_loss, evaluate, evaluate_accuracy, gradients, train

__version__ = "0.1.0"

__all__ = [
    "Example",
    "Vocabulary",
    "build_vocab",
    "load_dataset",
    "majority_dataset",
    "save_dataset",
    "ArgumentError",
    "CheckpointError",
    "ContractionSizeError",
    "DataError",
    "DegenerateStateError",
    "DimensionError",
    "ParseError",
    "TnseqError",
    "Model",
    "ModelConfig",
    "contraction_cost",
    "forward",
    "forward_batch",
    "forward_ctns",
    "init_parameters",
    "model_keys",
    "build_scheme",
    "count_parameters",
    "merge_schedule",
    "parse_tree_from_text",
    "sharing_key",
    "TrainConfig",
    "bce_loss",
    "evaluate",
    "evaluate_accuracy",
    "gradients",
    "train",
]
