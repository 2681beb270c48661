"""Train/test splitting, minority oversampling and cross-validated grid search."""

from __future__ import annotations

import itertools
import warnings
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Mapping

import numpy as np

from .._random import derive_seed
from ..harmonize import FeatureMatrix
from .metrics import roc_auc
from .models import train


def _allocate(sizes: list[int], total: int) -> list[int]:
    """Integer shares of ``total`` proportional to ``sizes`` (largest remainder, ties to earlier)."""
    n = sum(sizes)
    exact = [total * s / n for s in sizes]
    out = [int(np.floor(e)) for e in exact]
    rest = total - sum(out)
    order = sorted(range(len(sizes)), key=lambda i: (-(exact[i] - out[i]), i))
    for i in order[:rest]:
        out[i] += 1
    return out


def split_indices(y, ratio: float = 0.8, seed: int = 0, groups=None) -> tuple[np.ndarray, np.ndarray]:
    """Seeded, label-stratified split; with ``groups`` no group straddles the two sides.

    Groups are stratified by whether they contain any positive row and taken
    whole until each stratum reaches its share of training rows.
    """
    y = np.asarray(y).astype(int)
    n = len(y)
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    if n < 10:
        raise ValueError("need at least 10 rows to split")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    train_idx: list[int] = []
    if groups is None:
        strata = [np.flatnonzero(y == c) for c in (0, 1)]
        quotas = _allocate([len(s) for s in strata], int(round(ratio * n)))
        for members, quota in zip(strata, quotas):
            train_idx.extend(rng.permutation(members)[:quota].tolist())
    else:
        groups = np.asarray([str(g) for g in groups])
        uniq, inverse = np.unique(groups, return_inverse=True)
        members = [[] for _ in uniq]
        for i, g in enumerate(inverse):
            members[g].append(i)
        has_pos = np.array([y[m].any() for m in members])
        for flag in (False, True):
            gids = rng.permutation(np.flatnonzero(has_pos == flag))
            rows_in = sum(len(members[g]) for g in gids)
            quota = ratio * rows_in
            taken = 0
            for g in gids:
                if taken + len(members[g]) / 2.0 > quota:
                    continue
                train_idx.extend(members[g])
                taken += len(members[g])
    train_idx = np.sort(np.array(train_idx, dtype=int))
    test_idx = np.setdiff1d(np.arange(n), train_idx)
    for name, idx in (("train", train_idx), ("test", test_idx)):
        if len(np.unique(y[idx])) < 2:
            raise ValueError(f"a label is absent from the {name} split; the dataset is too small to split")
    return train_idx, test_idx


def split_train_test(matrix: FeatureMatrix, ratio: float = 0.8, seed: int = 0, grouped: bool = True):
    tr, te = split_indices(matrix.y, ratio, seed, matrix.groups if grouped else None)
    return matrix.subset(tr), matrix.subset(te)


def oversample_indices(y, seed: int) -> np.ndarray:
    """Row indices of the balanced set: every original row, then minority duplicates."""
    y = np.asarray(y).astype(int)
    counts = np.bincount(y, minlength=2)
    if (counts == 0).any():
        raise ValueError("oversampling needs both classes")
    minority = int(np.argmin(counts)) if counts[0] != counts[1] else 1
    pool = np.flatnonzero(y == minority)
    extra = np.random.default_rng(derive_seed(seed, "oversample")).choice(pool, size=abs(int(counts[1] - counts[0])), replace=True)
    return np.concatenate([np.arange(len(y)), extra])


def oversample(train_set: FeatureMatrix, seed: int = 0) -> FeatureMatrix:
    """Duplicate minority rows at random (with replacement) until the classes balance."""
    idx = oversample_indices(train_set.y, seed)
    out = train_set.subset(idx)
    n = len(train_set)
    out.origin = np.concatenate([train_set.origin, idx[n:]])
    return out


def stratified_folds(y, folds: int, seed: int) -> np.ndarray:
    """Fold id per row; each class is shuffled and dealt round-robin."""
    y = np.asarray(y).astype(int)
    fold_of = np.empty(len(y), dtype=int)
    rng = np.random.default_rng(derive_seed(seed, "folds"))
    offset = 0
    for c in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == c))
        fold_of[members] = (np.arange(len(members)) + offset) % folds
        offset += len(members)
    return fold_of


def expand_grid(grid: Mapping[str, list]) -> list[dict]:
    if not grid:
        return [{}]
    keys = list(grid)
    for k in keys:
        if len(grid[k]) == 0:
            raise ValueError(f"grid entry {k!r} has no candidates")
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def cv_scores(family: str, grid: Mapping[str, list], train_set: FeatureMatrix, folds: int = 3, seed: int = 0, n_jobs: int = 1) -> tuple[list[dict], np.ndarray]:
    """(candidates, scores[candidate, fold]) of validation AUC-ROC."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    candidates = expand_grid(grid)
    fold_of = stratified_folds(train_set.y, folds, seed)
    scores = np.full((len(candidates), folds), np.nan)

    def run(task):
        ci, f = task
        tr = np.flatnonzero(fold_of != f)
        va = np.flatnonzero(fold_of == f)
        y_tr, y_va = train_set.y[tr], train_set.y[va]
        if len(np.unique(y_tr)) < 2 or len(np.unique(y_va)) < 2:
            return ci, f, None
        balanced = tr[oversample_indices(y_tr, derive_seed(seed, "cv-oversample", f))]
        fit_set = (train_set.X[balanced], train_set.y[balanced], train_set.columns)
        model = train(family, candidates[ci], fit_set, seed=derive_seed(seed, "cv-fit", ci, f))
        return ci, f, roc_auc(y_va, model.predict_proba(train_set.X[va]))

    tasks = [(ci, f) for ci in range(len(candidates)) for f in range(folds)]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    for ci, f, score in results:
        if score is None:
            warnings.warn(f"fold {f} is single-class; candidate {candidates[ci]} scored 0.5 there", stacklevel=2)
            score = 0.5
        scores[ci, f] = score
    return candidates, scores


def grid_search(family: str, grid: Mapping[str, list], train_set: FeatureMatrix, folds: int = 3, seed: int = 0, n_jobs: int = 1) -> tuple[dict[str, Any], float]:
    """Best candidate by mean fold AUC; the earliest candidate wins ties."""
    candidates, scores = cv_scores(family, grid, train_set, folds, seed, n_jobs)
    means = scores.mean(axis=1)
    best = int(np.argmax(means))  # first maximum
    return candidates[best], float(means[best])
