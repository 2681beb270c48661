"""Uniform training / prediction / persistence interface over the model families."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .linear import LogisticModel, LogisticParams, fit_logistic
from .metrics import ModelMetrics, binary_metrics
from .mlp import MLPModel, MLPParams, fit_mlp
from .trees import AdaBoostModel, GBTModel, GBTParams, Tree, fit_adaboost, fit_gbt, sigmoid

FAMILIES = ("gbt", "adaboost", "logistic", "mlp")
FORMAT_VERSION = 1

# Names of the rows in the comparison tables.
DISPLAY_NAMES = {
    "mlp": "NeuralNetwork",
    "adaboost": "AdaBoost",
    "logistic": "LogisticRegression",
    "gbt_plain": "GradientBoosting",
    "gbt_xgb": "XGBoost",
}

_PARAM_TYPES = {"gbt": GBTParams, "logistic": LogisticParams, "mlp": MLPParams}


def _params(family: str, hyper: Mapping[str, Any]):
    if family == "adaboost":
        unknown = set(hyper) - {"n_stumps", "max_bins"}
        if unknown:
            raise ValueError(f"unknown adaboost hyperparameters {sorted(unknown)}")
        if int(hyper.get("n_stumps", 50)) < 1:
            raise ValueError("n_stumps must be >= 1")
        return dict(hyper)
    if family not in _PARAM_TYPES:
        raise ValueError(f"unknown model family {family!r}; choose from {FAMILIES}")
    try:
        params = _PARAM_TYPES[family](**hyper)
    except TypeError as exc:
        raise ValueError(f"bad {family} hyperparameters: {exc}") from None
    params.validate()
    return params


@dataclass
class TrainedModel:
    family: str
    columns: list[str]
    estimator: Any
    hyperparameters: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def _check(self, X) -> np.ndarray:
        columns = getattr(X, "columns", None)
        if columns is not None and list(columns) != self.columns:
            raise ValueError("feature columns differ from the training layout")
        X = np.asarray(getattr(X, "X", X), dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} features, got {X.shape[1]}")
        return X

    def margin(self, X) -> np.ndarray:
        return self.estimator.margin(self._check(X))

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.margin(X))

    @property
    def trees(self) -> list[Tree] | None:
        return getattr(self.estimator, "trees", None)

    @property
    def base_score(self) -> float:
        return float(getattr(self.estimator, "base_score", 0.0))

    # -- persistence --

    def to_dict(self) -> dict:
        est = self.estimator
        if self.family == "gbt":
            payload = {"base_score": est.base_score, "stage_losses": est.stage_losses, "trees": [t.to_dict() for t in est.trees]}
        elif self.family == "adaboost":
            payload = {"trees": [t.to_dict() for t in est.trees]}
        elif self.family == "logistic":
            payload = {"weights": est.weights.tolist(), "bias": est.bias, "n_epochs": est.n_epochs, "grad_norm": est.grad_norm}
        else:
            payload = {"W1": est.W1.tolist(), "b1": est.b1.tolist(), "w2": est.w2.tolist(), "b2": est.b2}
        return {
            "format_version": FORMAT_VERSION,
            "family": self.family,
            "columns": self.columns,
            "hyperparameters": self.hyperparameters,
            "metadata": self.metadata,
            "model": payload,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainedModel":
        if data.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {data.get('format_version')!r}")
        family = data["family"]
        p = data["model"]
        if family == "gbt":
            est = GBTModel([Tree.from_dict(t) for t in p["trees"]], p["base_score"], list(p["stage_losses"]))
        elif family == "adaboost":
            est = AdaBoostModel([Tree.from_dict(t) for t in p["trees"]])
        elif family == "logistic":
            est = LogisticModel(np.array(p["weights"], dtype=float), float(p["bias"]), p["n_epochs"], p["grad_norm"])
        elif family == "mlp":
            est = MLPModel(np.array(p["W1"], dtype=float), np.array(p["b1"], dtype=float), np.array(p["w2"], dtype=float), float(p["b2"]))
        else:
            raise ValueError(f"unknown model family {family!r}")
        return cls(family, list(data["columns"]), est, dict(data["hyperparameters"]), dict(data["metadata"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train(family: str, hyperparameters: Mapping[str, Any], data, seed: int = 0) -> TrainedModel:
    """Fit ``family`` on a FeatureMatrix (or an ``(X, y, columns)`` tuple)."""
    if isinstance(data, tuple):
        X, y, *rest = data
        columns = list(rest[0]) if rest else [f"x{j}" for j in range(np.shape(X)[1])]
    else:
        X, y, columns = data.X, data.y, list(data.columns)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both classes")
    params = _params(family, hyperparameters)
    if family == "gbt":
        est = fit_gbt(X, y, params)
    elif family == "adaboost":
        est = fit_adaboost(X, y, int(params.get("n_stumps", 50)), int(params.get("max_bins", 256)))
    elif family == "logistic":
        est = fit_logistic(X, y, params)
    else:
        est = fit_mlp(X, y, params, seed)
    return TrainedModel(family, columns, est, dict(hyperparameters), {"seed": int(seed)})


def predict_proba(model: TrainedModel, x) -> np.ndarray:
    return model.predict_proba(x)


def evaluate(model: TrainedModel, test, threshold: float = 0.5) -> ModelMetrics:
    """Thresholded and ranking metrics on an untouched test split."""
    origin = getattr(test, "origin", None)
    if origin is not None and (np.asarray(origin) >= 0).any():
        raise ValueError("evaluation set contains oversampled duplicate rows")
    if len(test) == 0:
        raise ValueError("empty test set")
    return binary_metrics(test.y, model.predict_proba(test), threshold)


def check_columns(model: TrainedModel, columns: Sequence[str]) -> None:
    if list(columns) != model.columns:
        raise ValueError("feature columns differ from the training layout")
