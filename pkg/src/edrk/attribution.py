"""SHAP attributions on the margin (log-odds) scale.

``tree_shap`` is the polynomial-time path-dependent algorithm, vectorised over
samples.  Node split fractions come from the background rows that reach each
node.  ``brute_force_shapley`` enumerates every feature subset with the same
conditional-expectation semantics and serves as the oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .learn.models import TrainedModel
from .learn.trees import Tree

MAX_BRUTE_FORCE_FEATURES = 15


@dataclass
class TreeEnsemble:
    trees: list[Tree]
    base_score: float = 0.0
    n_features: int | None = None

    @classmethod
    def from_model(cls, model: TrainedModel) -> "TreeEnsemble":
        if model.trees is None:
            raise ValueError(f"{model.family} model has no trees")
        return cls(list(model.trees), model.base_score, len(model.columns))

    def margin(self, X: np.ndarray) -> np.ndarray:
        out = np.full(len(X), self.base_score)
        for t in self.trees:
            out += t.predict(X)
        return out


@dataclass
class ShapVector:
    sample_id: str
    base_value: float
    phi: np.ndarray
    features: list[str]

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "base_value": float(self.base_value),
            "phi": {f: float(v) for f, v in zip(self.features, self.phi)},
        }


def node_counts(tree: Tree, background: np.ndarray) -> np.ndarray:
    """Number of background rows passing through each node."""
    counts = np.zeros(tree.n_nodes)
    masks = {0: np.ones(len(background), dtype=bool)}
    stack = [0]
    while stack:
        i = stack.pop()
        m = masks.pop(i)
        counts[i] = m.sum()
        if tree.left[i] >= 0:
            go_left = background[:, tree.feature[i]] <= tree.threshold[i]
            masks[int(tree.left[i])] = m & go_left
            masks[int(tree.right[i])] = m & ~go_left
            stack += [int(tree.left[i]), int(tree.right[i])]
    return counts


def split_fractions(tree: Tree, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(left, right) share of each node's background rows; 0.5/0.5 for empty nodes."""
    left = np.full(tree.n_nodes, 0.5)
    right = np.full(tree.n_nodes, 0.5)
    for i in range(tree.n_nodes):
        if tree.left[i] >= 0 and counts[i] > 0:
            left[i] = counts[tree.left[i]] / counts[i]
            right[i] = counts[tree.right[i]] / counts[i]
    return left, right


def _tree_fractions(tree: Tree, background: np.ndarray | None):
    counts = tree.cover if background is None else node_counts(tree, background)
    return split_fractions(tree, counts)


def expected_value(tree: Tree, left: np.ndarray, right: np.ndarray) -> float:
    def rec(i):
        if tree.left[i] < 0:
            return tree.value[i]
        return left[i] * rec(tree.left[i]) + right[i] * rec(tree.right[i])

    return float(rec(0))


# -- path bookkeeping (one weight vector per path element, one entry per sample) -----------------


def _extend(path, d, z, o, n):
    ds, zs, os_, ws = path
    depth = len(ds)
    ds, zs, os_, ws = ds + [d], zs + [z], os_ + [o], ws + [np.ones(n) if depth == 0 else np.zeros(n)]
    for i in range(depth - 1, -1, -1):
        ws[i + 1] = ws[i + 1] + o * ws[i] * (i + 1) / (depth + 1)
        ws[i] = z * ws[i] * (depth - i) / (depth + 1)
    return ds, zs, os_, ws


def _unwind(path, k):
    ds, zs, os_, ws = path
    depth = len(ds) - 1
    o, z = os_[k], zs[k]
    hot = o != 0
    nxt = ws[depth]
    new = list(ws)
    for i in range(depth - 1, -1, -1):
        a = nxt * (depth + 1) / np.where(hot, (i + 1) * o, 1.0)
        b = ws[i] * (depth + 1) / (z * (depth - i)) if z != 0 else np.full_like(ws[i], np.nan)
        new[i] = np.where(hot, a, b)
        nxt = np.where(hot, ws[i] - new[i] * z * (depth - i) / (depth + 1), nxt)
    keep = [j for j in range(depth + 1) if j != k]
    return [ds[j] for j in keep], [zs[j] for j in keep], [os_[j] for j in keep], new[:depth]


def _unwound_sum(path, k):
    ds, zs, os_, ws = path
    depth = len(ds) - 1
    o, z = os_[k], zs[k]
    hot = o != 0
    safe_o = np.where(hot, o, 1.0)
    nxt = ws[depth]
    total_hot = np.zeros_like(nxt)
    total_cold = np.zeros_like(nxt)
    for i in range(depth - 1, -1, -1):
        tmp = nxt / ((i + 1) * safe_o)
        total_hot = total_hot + tmp
        nxt = ws[i] - tmp * z * (depth - i)
        if z != 0:
            total_cold = total_cold + ws[i] / (z * (depth - i))
        else:
            total_cold = np.full_like(nxt, np.nan)
    return np.where(hot, total_hot, total_cold) * (depth + 1)


def _tree_shap_one(tree: Tree, X: np.ndarray, left_frac, right_frac, phi: np.ndarray) -> None:
    n = len(X)

    def rec(node, path, pz, po, pd):
        path = _extend(path, pd, pz, po, n)
        if tree.left[node] < 0:
            ds, zs, os_, _ = path
            for i in range(1, len(ds)):
                w = _unwound_sum(path, i)
                contrib = np.nan_to_num(w * (os_[i] - zs[i]), nan=0.0, posinf=0.0, neginf=0.0)
                phi[:, ds[i]] += contrib * tree.value[node]
            return
        f = int(tree.feature[node])
        goes_left = (X[:, f] <= tree.threshold[node]).astype(float)
        iz, io = 1.0, np.ones(n)
        if f in path[0][1:]:
            k = path[0].index(f, 1)
            iz, io = path[1][k], path[2][k]
            path = _unwind(path, k)
        for child, frac, hot in (
            (int(tree.left[node]), left_frac[node], goes_left),
            (int(tree.right[node]), right_frac[node], 1.0 - goes_left),
        ):
            cz, co = iz * frac, io * hot
            if cz == 0 and not co.any():
                continue  # no background and no sample reaches this child
            rec(child, path, cz, co, f)

    rec(0, ([], [], [], []), 1.0, np.ones(n), -1)


def tree_shap(ensemble, X, background: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """(phi[n, M], base_value) for a tree ensemble on the margin scale.

    ``background`` rows define node cover; without it the training cover stored
    in the trees is used.  The result is additive over trees.
    """
    if isinstance(ensemble, TrainedModel):
        ensemble = TreeEnsemble.from_model(ensemble)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if ensemble.n_features is not None and X.shape[1] != ensemble.n_features:
        raise ValueError(f"expected {ensemble.n_features} features, got {X.shape[1]}")
    if background is not None:
        background = np.atleast_2d(np.asarray(background, dtype=float))
        if len(background) == 0:
            raise ValueError("background must be nonempty")
        if background.shape[1] != X.shape[1]:
            raise ValueError("background and samples differ in feature count")
    phi = np.zeros(X.shape)
    base = ensemble.base_score
    with np.errstate(divide="ignore", invalid="ignore"):
        for tree in ensemble.trees:
            if tree.left.size and tree.feature[tree.left >= 0].size and tree.feature[tree.left >= 0].max() >= X.shape[1]:
                raise ValueError("tree splits on a feature beyond the sample width")
            left, right = _tree_fractions(tree, background)
            base += expected_value(tree, left, right)
            _tree_shap_one(tree, X, left, right, phi)
    return phi, float(base)


class PathDependentExplainer:
    """Caches per-tree split fractions for repeated calls."""

    def __init__(self, model, background: np.ndarray | None = None, feature_names: Sequence[str] | None = None):
        self.ensemble = model if isinstance(model, TreeEnsemble) else TreeEnsemble.from_model(model)
        self.feature_names = list(feature_names) if feature_names is not None else list(getattr(model, "columns", []))
        bg = None if background is None else np.asarray(background, dtype=float)
        self.fractions = [_tree_fractions(t, bg) for t in self.ensemble.trees]
        self.base_value = self.ensemble.base_score + sum(
            expected_value(t, l, r) for t, (l, r) in zip(self.ensemble.trees, self.fractions)
        )

    def shap_values(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.ensemble.n_features is not None and X.shape[1] != self.ensemble.n_features:
            raise ValueError(f"expected {self.ensemble.n_features} features, got {X.shape[1]}")
        phi = np.zeros(X.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            for tree, (left, right) in zip(self.ensemble.trees, self.fractions):
                _tree_shap_one(tree, X, left, right, phi)
        return phi

    def explain(self, x: np.ndarray, sample_id: str = "") -> ShapVector:
        return ShapVector(sample_id, self.base_value, self.shap_values(x)[0], self.feature_names)


# -- exact enumeration ---------------------------------------------------------------------------


def _tree_conditional(tree: Tree, X: np.ndarray, in_set: np.ndarray, left, right) -> np.ndarray:
    """E[tree | x_S] with path-dependent weighting: features outside S follow both children."""

    def rec(i):
        if tree.left[i] < 0:
            return np.full(len(X), tree.value[i])
        f = tree.feature[i]
        lv, rv = rec(tree.left[i]), rec(tree.right[i])
        if in_set[f]:
            return np.where(X[:, f] <= tree.threshold[i], lv, rv)
        return left[i] * lv + right[i] * rv

    return rec(0)


def brute_force_shapley(model, X, background: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Exact Shapley values by enumerating all 2^M subsets.

    Tree ensembles use the path-dependent conditional expectation; any other
    model (anything with ``margin``) uses the interventional expectation over
    ``background``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    M = X.shape[1]
    if M > MAX_BRUTE_FORCE_FEATURES:
        raise ValueError(f"brute force is limited to {MAX_BRUTE_FORCE_FEATURES} features, got {M}")
    if isinstance(model, TrainedModel) and model.trees is not None:
        model = TreeEnsemble.from_model(model)

    if isinstance(model, TreeEnsemble):
        bg = None if background is None else np.asarray(background, dtype=float)
        fractions = [_tree_fractions(t, bg) for t in model.trees]

        def value(mask):
            out = np.full(len(X), model.base_score)
            for t, (l, r) in zip(model.trees, fractions):
                out += _tree_conditional(t, X, mask, l, r)
            return out
    else:
        if background is None:
            raise ValueError("non-tree models need a background set")
        bg = np.atleast_2d(np.asarray(background, dtype=float))

        def value(mask):
            out = np.empty(len(X))
            for s in range(len(X)):
                mixed = np.where(mask, X[s], bg)
                out[s] = model.margin(mixed).mean()
            return out

    cache = {}
    for code in range(1 << M):
        mask = np.array([(code >> j) & 1 for j in range(M)], dtype=bool)
        cache[code] = value(mask)
    weights = [math.factorial(s) * math.factorial(M - s - 1) / math.factorial(M) for s in range(M)]
    phi = np.zeros(X.shape)
    for code in range(1 << M):
        size = bin(code).count("1")
        for j in range(M):
            if not (code >> j) & 1:
                phi[:, j] += weights[size] * (cache[code | (1 << j)] - cache[code])
    return phi, float(cache[0][0]) if len(X) else 0.0


def linear_shap(model, x, background_mean) -> tuple[np.ndarray, float]:
    """phi_i = w_i (x_i - mean_i); base = w . mean + b."""
    est = model.estimator if isinstance(model, TrainedModel) else model
    w = np.asarray(est.weights, dtype=float)
    mean = np.asarray(background_mean, dtype=float)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    return w * (X - mean), float(w @ mean + est.bias)


# -- aggregation and export ----------------------------------------------------------------------


@dataclass
class ImportanceRanking:
    items: list[tuple[str, float]]

    def names(self) -> list[str]:
        return [name for name, _ in self.items]

    def to_dict(self) -> dict:
        return {"ranking": [{"feature": n, "mean_abs_shap": v} for n, v in self.items]}


def global_importance(phi: np.ndarray, names: Sequence[str]) -> ImportanceRanking:
    phi = np.atleast_2d(np.asarray(phi, dtype=float))
    if len(phi) == 0:
        raise ValueError("need at least one sample")
    means = np.abs(phi).mean(axis=0)
    items = sorted(zip(names, (float(m) for m in means)), key=lambda t: (-t[1], t[0]))
    return ImportanceRanking(items)


def group_shap(phi: np.ndarray, column_meta: Sequence[dict]) -> tuple[np.ndarray, list[str]]:
    """Sum attributions of columns that share a source field (one-hot groups)."""
    sources: list[str] = []
    for meta in column_meta:
        if meta["source"] not in sources:
            sources.append(meta["source"])
    index = {s: i for i, s in enumerate(sources)}
    phi = np.atleast_2d(phi)
    out = np.zeros((len(phi), len(sources)))
    for j, meta in enumerate(column_meta):
        out[:, index[meta["source"]]] += phi[:, j]
    return out, sources


def export_shap(path: str | Path, vectors: Sequence[ShapVector]) -> None:
    Path(path).write_text(json.dumps([v.to_dict() for v in vectors], indent=1) + "\n")


def importance_svg(ranking: ImportanceRanking, title: str = "SHAP feature importance", top: int = 15, labels=None) -> str:
    """Static horizontal bar chart, largest bar on top."""
    items = ranking.items[:top]
    labels = labels or {}
    bar_h, gap, left, width = 22, 6, 300, 380
    height = 60 + len(items) * (bar_h + gap)
    vmax = max((v for _, v in items), default=0.0) or 1.0
    esc = lambda s: s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")  # noqa: E731
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 90}" height="{height}" font-family="sans-serif" font-size="12">',
        f'<text x="10" y="22" font-size="15" font-weight="bold">{esc(title)}</text>',
    ]
    for r, (name, value) in enumerate(items):
        y = 40 + r * (bar_h + gap)
        w = width * value / vmax
        parts.append(f'<text x="{left - 8}" y="{y + bar_h * 0.7:.1f}" text-anchor="end">{esc(labels.get(name, name))}</text>')
        parts.append(f'<rect x="{left}" y="{y}" width="{w:.2f}" height="{bar_h}" fill="#1f77b4"/>')
        parts.append(f'<text x="{left + w + 6:.2f}" y="{y + bar_h * 0.7:.1f}">{value:.3f}</text>')
    parts.append(f'<text x="{left + width / 2}" y="{height - 8}" text-anchor="middle">mean |SHAP value| (log-odds)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
