"""Multi-label recognition from partially observed labels.

Trains a category-attention classifier on ternary label matrices
(-1 known-negative, 0 unknown, +1 known-positive) and fills in unknown
entries during training with two pseudo-label sources: an image-specific
co-occurrence net and per-category prototype similarity, each gated by a
learned decision threshold.
"""

from .data import (Dataset, GeneratorConfig, Sample, benchmark_config,
                   drop_labels, generate, load, paired_affinity_matrix, save,
                   train_test_split)
from .estimator import PartialMultiLabelClassifier
from .metrics import EvalReport, evaluate, f1_measures, mean_average_precision
from .training import (TrainConfig, TrainState, TrainingError,
                       evaluate_state, load_checkpoint, predict,
                       save_checkpoint, train)

__all__ = [
    "Dataset", "GeneratorConfig", "Sample", "benchmark_config",
    "drop_labels", "generate", "load", "paired_affinity_matrix", "save",
    "train_test_split", "PartialMultiLabelClassifier", "EvalReport",
    "evaluate", "f1_measures", "mean_average_precision", "TrainConfig",
    "TrainState", "TrainingError", "evaluate_state", "load_checkpoint",
    "predict", "save_checkpoint", "train",
]
