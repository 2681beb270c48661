"""L2-regularised logistic regression by full-batch gradient descent."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class LogisticParams:
    l2: float = 1e-3
    epochs: int = 2000
    step: float = 1.0
    tol: float = 1e-6

    def validate(self):
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.step <= 0:
            raise ValueError("step must be > 0")


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    n_epochs: int = 0
    grad_norm: float = math.nan

    def margin(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.weights + self.bias


def logistic_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float) -> tuple[float, np.ndarray, float]:
    """Mean log loss + (l2/2)|w|^2, and its gradient with respect to (w, b)."""
    z = X @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w @ w)
    r = 0.5 * (1.0 + np.tanh(0.5 * z)) - y
    gw = X.T @ r / len(y) + l2 * w
    gb = float(r.mean())
    return loss, gw, gb


def fit_logistic(X: np.ndarray, y: np.ndarray, params: LogisticParams) -> LogisticModel:
    """Gradient descent until the gradient norm drops below ``tol`` or the epoch cap.

    A step that raises the objective is retried at half the step size.
    """
    params.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.zeros(X.shape[1])
    b = 0.0
    step = params.step
    loss, gw, gb = logistic_objective(w, b, X, y, params.l2)
    epoch = 0
    gnorm = math.sqrt(float(gw @ gw) + gb * gb)
    while epoch < params.epochs and gnorm >= params.tol:
        epoch += 1
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            new_loss, new_gw, new_gb = logistic_objective(w_new, b_new, X, y, params.l2)
            if not math.isfinite(new_loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            if new_loss <= loss or step < 1e-12:
                break
            step *= 0.5
        w, b, loss, gw, gb = w_new, b_new, new_loss, new_gw, new_gb
        gnorm = math.sqrt(float(gw @ gw) + gb * gb)
    return LogisticModel(w, b, epoch, gnorm)
