"""One-hidden-layer ReLU network with a sigmoid output, trained by mini-batch SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class MLPParams:
    hidden_units: int = 32
    epochs: int = 20
    step: float = 0.05
    batch: int = 128
    l2: float = 1e-4
    momentum: float = 0.9

    def validate(self):
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class MLPModel:
    W1: np.ndarray  # (n_features, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden,)
    b2: float

    def margin(self, X: np.ndarray) -> np.ndarray:
        hidden = np.maximum(np.asarray(X, dtype=float) @ self.W1 + self.b1, 0.0)
        return hidden @ self.w2 + self.b2

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.w2, [self.b2]])

    @classmethod
    def unflat(cls, theta: np.ndarray, n_features: int, hidden: int) -> "MLPModel":
        i = n_features * hidden
        W1 = theta[:i].reshape(n_features, hidden)
        b1 = theta[i : i + hidden]
        w2 = theta[i + hidden : i + 2 * hidden]
        return cls(W1.copy(), b1.copy(), w2.copy(), float(theta[-1]))


def init_mlp(n_features: int, hidden: int, rng: np.random.Generator) -> MLPModel:
    """He-normal input weights, Xavier-scaled output weights, zero biases."""
    W1 = rng.normal(0.0, math.sqrt(2.0 / n_features), size=(n_features, hidden))
    w2 = rng.normal(0.0, math.sqrt(1.0 / hidden), size=hidden)
    return MLPModel(W1, np.zeros(hidden), w2, 0.0)


def loss_and_grad(model: MLPModel, X: np.ndarray, y: np.ndarray, l2: float = 0.0):
    """Mean binary cross-entropy (+ l2/2 on weights) and gradients in ``MLPModel`` layout."""
    pre = X @ model.W1 + model.b1
    hidden = np.maximum(pre, 0.0)
    z = hidden @ model.w2 + model.b2
    n = len(y)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    loss += 0.5 * l2 * (float(np.sum(model.W1**2)) + float(model.w2 @ model.w2))
    dz = (0.5 * (1.0 + np.tanh(0.5 * z)) - y) / n
    gw2 = hidden.T @ dz + l2 * model.w2
    gb2 = float(dz.sum())
    dpre = np.outer(dz, model.w2) * (pre > 0)
    gW1 = X.T @ dpre + l2 * model.W1
    gb1 = dpre.sum(axis=0)
    return loss, MLPModel(gW1, gb1, gw2, gb2)


def fit_mlp(X: np.ndarray, y: np.ndarray, params: MLPParams, seed: int) -> MLPModel:
    params.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    model = init_mlp(X.shape[1], params.hidden_units, rng)
    velocity = np.zeros_like(model.flat())
    n = len(y)
    for epoch in range(params.epochs):
        order = rng.permutation(n)
        for start in range(0, n, params.batch):
            idx = order[start : start + params.batch]
            loss, grad = loss_and_grad(model, X[idx], y[idx], params.l2)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss in epoch {epoch + 1}")
            velocity = params.momentum * velocity - params.step * grad.flat()
            model = MLPModel.unflat(model.flat() + velocity, X.shape[1], params.hidden_units)
    return model
