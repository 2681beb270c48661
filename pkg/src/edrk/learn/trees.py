"""Regression trees on binned features, gradient boosting and AdaBoost stumps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_BINS = 256


@dataclass
class Tree:
    """Array-encoded binary tree.  ``left[i] == -1`` marks a leaf.

    Rows with ``x[feature] <= threshold`` go left.  ``cover`` is the number of
    training rows that reached each node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, i: int) -> bool:
        return self.left[i] < 0

    @property
    def depth(self) -> int:
        def rec(i):
            return 0 if self.left[i] < 0 else 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.left[node] >= 0)
        while len(active):
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.left[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def used_features(self) -> set[int]:
        return {int(f) for f, lf in zip(self.feature, self.left) if lf >= 0}

    def validate(self) -> None:
        """Every internal node has two children and every node is reached exactly once from the root."""
        seen = np.zeros(self.n_nodes, dtype=int)
        stack = [0]
        while stack:
            i = stack.pop()
            seen[i] += 1
            if seen[i] > 1:
                raise ValueError("tree has a cycle or shared child")
            if self.left[i] >= 0:
                if self.right[i] < 0:
                    raise ValueError(f"node {i} has one child")
                stack += [int(self.left[i]), int(self.right[i])]
            elif self.right[i] >= 0:
                raise ValueError(f"leaf {i} has a right child")
        if not seen.all():
            raise ValueError("unreachable nodes")

    def to_dict(self, i: int = 0) -> dict:
        if self.left[i] < 0:
            return {"value": float(self.value[i]), "cover": float(self.cover[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "cover": float(self.cover[i]),
            "left": self.to_dict(int(self.left[i])),
            "right": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Tree":
        builder = _Builder()

        def rec(node):
            if "value" in node:
                return builder.leaf(node["value"], node["cover"])
            i = builder.split(node["feature"], node["threshold"], node["cover"])
            builder.left[i] = rec(node["left"])
            builder.right[i] = rec(node["right"])
            return i

        rec(data)
        return builder.build()

    @classmethod
    def leaf_only(cls, value: float, cover: float = 1.0) -> "Tree":
        b = _Builder()
        b.leaf(value, cover)
        return b.build()


class _Builder:
    def __init__(self):
        self.feature, self.threshold, self.left, self.right, self.value, self.cover = [], [], [], [], [], []

    def _add(self, feature, threshold, value, cover) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        self.cover.append(cover)
        return len(self.feature) - 1

    def leaf(self, value, cover) -> int:
        return self._add(-1, 0.0, float(value), float(cover))

    def split(self, feature, threshold, cover) -> int:
        return self._add(int(feature), float(threshold), 0.0, float(cover))

    def build(self) -> Tree:
        return Tree(
            np.array(self.feature, dtype=np.int64),
            np.array(self.threshold, dtype=float),
            np.array(self.left, dtype=np.int64),
            np.array(self.right, dtype=np.int64),
            np.array(self.value, dtype=float),
            np.array(self.cover, dtype=float),
        )


# -- binning -------------------------------------------------------------------------------------


@dataclass
class Binner:
    """Per-feature candidate thresholds: midpoints between distinct values, or quantile cuts."""

    edges: list[np.ndarray]

    @classmethod
    def fit(cls, X: np.ndarray, max_bins: int = MAX_BINS) -> "Binner":
        edges = []
        for j in range(X.shape[1]):
            values = np.unique(X[:, j])
            if len(values) > max_bins:
                qs = np.quantile(X[:, j], np.linspace(0, 1, max_bins + 1)[1:-1])
                values = np.unique(np.concatenate([qs, values[[0, -1]]]))
            edges.append((values[:-1] + values[1:]) / 2.0)
        return cls(edges)

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Bin codes; ``code <= j`` iff ``x <= edges[j]``."""
        codes = np.empty(X.shape, dtype=np.int32)
        for j, e in enumerate(self.edges):
            codes[:, j] = np.searchsorted(e, X[:, j], side="left")
        return codes

    @property
    def n_bins(self) -> np.ndarray:
        return np.array([len(e) + 1 for e in self.edges])


class _Histogrammer:
    """Gradient/hessian histograms via one bincount over offset bin codes."""

    def __init__(self, codes: np.ndarray, n_bins: np.ndarray):
        self.n_bins = n_bins
        self.offsets = np.concatenate([[0], np.cumsum(n_bins)[:-1]])
        self.total = int(n_bins.sum())
        self.flat = codes + self.offsets[None, :]

    def __call__(self, rows: np.ndarray, *weights: np.ndarray) -> list[np.ndarray]:
        flat = self.flat[rows].ravel()
        n_feat = self.flat.shape[1]
        return [np.bincount(flat, weights=np.repeat(w[rows], n_feat), minlength=self.total) for w in weights]

    def per_feature(self, hist: np.ndarray) -> list[np.ndarray]:
        return [hist[o : o + b] for o, b in zip(self.offsets, self.n_bins)]


def _best_newton_split(hist_g, hist_h, hist_n, G, H, lam, min_child_weight, min_samples_leaf, binner_edges, histo):
    """Highest-gain (feature, bin) split; ties go to the lowest feature then the lowest bin."""
    parent = G * G / (H + lam)
    best = (0.0, -1, -1)
    for j, (g, h, c) in enumerate(zip(histo.per_feature(hist_g), histo.per_feature(hist_h), histo.per_feature(hist_n))):
        if len(g) < 2:
            continue
        GL = np.cumsum(g)[:-1]
        HL = np.cumsum(h)[:-1]
        NL = np.cumsum(c)[:-1]
        GR, HR, NR = G - GL, H - HL, c.sum() - NL
        ok = (HL >= min_child_weight) & (HR >= min_child_weight) & (NL >= min_samples_leaf) & (NR >= min_samples_leaf)
        if not ok.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = 0.5 * (GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent)
        gain = np.where(ok, gain, -np.inf)
        b = int(np.argmax(gain))
        if gain[b] > best[0] + 1e-12:
            best = (float(gain[b]), j, b)
    return best


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def log_loss(y: np.ndarray, margin: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


@dataclass
class GBTParams:
    n_trees: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    l2_lambda: float = 1.0
    min_child_weight: float = 1e-3
    min_samples_leaf: int = 1
    max_bins: int = MAX_BINS

    def validate(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 1 <= self.max_depth <= 12:
            raise ValueError("max_depth must lie in [1, 12]")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if not 2 <= self.max_bins <= 65535:
            raise ValueError("max_bins must lie in [2, 65535]")


def _grow_tree(codes_hist: _Histogrammer, binner: Binner, g, h, params: GBTParams, leaf_scale: float) -> Tree:
    builder = _Builder()
    ones = np.ones(len(g))
    n_rows = len(g)
    root_rows = np.arange(n_rows)

    # depth-first with an explicit stack so node ids follow creation order
    def grow(rows, depth):
        G, H = float(g[rows].sum()), float(h[rows].sum())
        if depth < params.max_depth and len(rows) >= 2 * params.min_samples_leaf:
            hg, hh, hn = codes_hist(rows, g, h, ones)
            gain, j, b = _best_newton_split(
                hg, hh, hn, G, H, params.l2_lambda, params.min_child_weight, params.min_samples_leaf, binner.edges, codes_hist
            )
            if j >= 0:
                node = builder.split(j, binner.edges[j][b], len(rows))
                go_left = codes_hist.flat[rows, j] - codes_hist.offsets[j] <= b
                builder.left[node] = grow(rows[go_left], depth + 1)
                builder.right[node] = grow(rows[~go_left], depth + 1)
                return node
        denom = H + params.l2_lambda
        value = -leaf_scale * G / denom if denom > 0 else 0.0
        return builder.leaf(value, len(rows))

    grow(root_rows, 0)
    return builder.build()


@dataclass
class GBTModel:
    trees: list[Tree]
    base_score: float
    stage_losses: list[float]

    def margin(self, X: np.ndarray) -> np.ndarray:
        out = np.full(len(X), self.base_score)
        for t in self.trees:
            out += t.predict(X)
        return out


def fit_gbt(X: np.ndarray, y: np.ndarray, params: GBTParams) -> GBTModel:
    """Stagewise Newton boosting of the logistic loss.

    Leaf value is ``-lr * G / (H + lambda)``.  If a stage would raise the
    training loss its leaves are halved until it does not, so the recorded
    per-stage losses never increase.
    """
    params.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0/1")
    prior = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
    base = math.log(prior / (1 - prior))
    binner = Binner.fit(X, params.max_bins)
    histo = _Histogrammer(binner.transform(X), binner.n_bins)
    margin = np.full(len(y), base)
    loss = log_loss(y, margin)
    losses = [loss]
    trees = []
    for _ in range(params.n_trees):
        p = sigmoid(margin)
        g = p - y
        h = p * (1 - p)
        tree = _grow_tree(histo, binner, g, h, params, params.learning_rate)
        step = tree.predict(X)
        new_loss = log_loss(y, margin + step)
        halvings = 0
        while new_loss > loss and halvings < 60:
            tree.value *= 0.5
            step *= 0.5
            new_loss = log_loss(y, margin + step)
            halvings += 1
        if new_loss > loss:
            tree.value[:] = 0.0
            step[:] = 0.0
            new_loss = loss
        if not math.isfinite(new_loss):
            raise FloatingPointError(f"non-finite training loss at stage {len(trees) + 1}")
        margin = margin + step
        loss = new_loss
        losses.append(loss)
        trees.append(tree)
    return GBTModel(trees, base, losses)


# -- AdaBoost (SAMME, two classes) ---------------------------------------------------------------


@dataclass
class AdaBoostModel:
    trees: list[Tree]  # stumps with leaf values +alpha / -alpha

    def margin(self, X: np.ndarray) -> np.ndarray:
        out = np.zeros(len(X))
        for t in self.trees:
            out += t.predict(X)
        return out


def fit_adaboost(X: np.ndarray, y: np.ndarray, n_stumps: int = 50, max_bins: int = MAX_BINS) -> AdaBoostModel:
    """SAMME with decision stumps; the vote weight is ln((1 - err) / err)."""
    if n_stumps < 1:
        raise ValueError("n_stumps must be >= 1")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    sign = np.where(y == 1, 1.0, -1.0)
    binner = Binner.fit(X, max_bins)
    histo = _Histogrammer(binner.transform(X), binner.n_bins)
    rows = np.arange(len(y))
    pos = (y == 1).astype(float)
    w = np.full(len(y), 1.0 / len(y))
    trees = []
    for _ in range(n_stumps):
        hp, hneg, hn = histo(rows, w * pos, w * (1 - pos), np.ones(len(y)))
        total_p, total_n = float((w * pos).sum()), float((w * (1 - pos)).sum())
        best = (min(total_p, total_n), -1, -1)  # constant stump
        for j, (cp, cn) in enumerate(zip(histo.per_feature(hp), histo.per_feature(hneg))):
            if len(cp) < 2:
                continue
            LP, LN = np.cumsum(cp)[:-1], np.cumsum(cn)[:-1]
            RP, RN = total_p - LP, total_n - LN
            err = np.minimum(LP, LN) + np.minimum(RP, RN)
            b = int(np.argmin(err))
            if err[b] < best[0] - 1e-15:
                best = (float(err[b]), j, b)
        err, j, b = best
        err = min(max(err, 1e-10), 1.0)
        if err >= 0.5:
            break
        alpha = math.log((1 - err) / err)
        builder = _Builder()
        if j < 0:
            builder.leaf(alpha if total_p >= total_n else -alpha, len(y))
            pred = np.full(len(y), 1.0 if total_p >= total_n else -1.0)
        else:
            LP, LN = np.cumsum(histo.per_feature(hp)[j])[b], np.cumsum(histo.per_feature(hneg)[j])[b]
            left_sign = 1.0 if LP > LN else -1.0
            right_sign = 1.0 if (total_p - LP) > (total_n - LN) else -1.0
            go_left = histo.flat[:, j] - histo.offsets[j] <= b
            node = builder.split(j, binner.edges[j][b], len(y))
            builder.left[node] = builder.leaf(left_sign * alpha, int(go_left.sum()))
            builder.right[node] = builder.leaf(right_sign * alpha, int((~go_left).sum()))
            pred = np.where(go_left, left_sign, right_sign)
        trees.append(builder.build())
        w = w * np.exp(alpha * (pred != sign))
        w /= w.sum()
    if not trees:
        trees.append(Tree.leaf_only(0.0, len(y)))
    return AdaBoostModel(trees)
