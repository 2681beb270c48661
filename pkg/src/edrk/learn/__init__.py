"""Model families, metrics and model selection."""

from .metrics import ModelMetrics, average_precision, binary_metrics, roc_auc
from .models import DISPLAY_NAMES, FAMILIES, TrainedModel, evaluate, predict_proba, train
from .selection import grid_search, oversample, split_train_test

__all__ = [
    "DISPLAY_NAMES",
    "FAMILIES",
    "ModelMetrics",
    "TrainedModel",
    "average_precision",
    "binary_metrics",
    "evaluate",
    "grid_search",
    "oversample",
    "predict_proba",
    "roc_auc",
    "split_train_test",
    "train",
]
