"""Binary classification metrics: thresholded rates, rank AUC and average precision."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


def roc_auc(y_true, scores) -> float | None:
    """Mann-Whitney U / (n_pos * n_neg) with midranks; None if a class is missing."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=float)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(y_true, scores) -> float | None:
    """Sum over distinct thresholds of (recall gain) x (precision), tied scores grouped."""
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=float)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        return None
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last_of_group]
    seen = last_of_group + 1
    precision = tp / seen
    recall = tp / n_pos
    gains = np.diff(np.r_[0.0, recall])
    return float(np.sum(gains * precision))


@dataclass
class ModelMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc_roc: float | None
    auc_pr: float | None
    n: int = 0
    threshold: float = 0.5

    def to_report(self) -> dict:
        """Keys as in the model comparison tables."""
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1_score": self.f1,
            "auc": self.auc_roc,
            "auc_pr": self.auc_pr,
        }

    def as_dict(self) -> dict:
        return asdict(self)


def binary_metrics(y_true, proba, threshold: float = 0.5) -> ModelMetrics:
    y = np.asarray(y_true).astype(int)
    p = np.asarray(proba, dtype=float)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    pred = (p >= threshold).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ModelMetrics(
        accuracy=float((pred == y).mean()),
        precision=precision,
        recall=recall,
        f1=f1,
        auc_roc=roc_auc(y, p),
        auc_pr=average_precision(y, p),
        n=len(y),
        threshold=threshold,
    )
