from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edrk.harmonize import FeatureMatrix
from edrk.learn import (
    TrainedModel,
    average_precision,
    binary_metrics,
    evaluate,
    grid_search,
    oversample,
    predict_proba,
    roc_auc,
    split_train_test,
    train,
)
from edrk.learn.linear import LogisticModel, LogisticParams, fit_logistic, logistic_objective
from edrk.learn.mlp import MLPModel, init_mlp, loss_and_grad
from edrk.learn.selection import split_indices
from edrk.learn.trees import GBTModel, GBTParams, Tree, fit_gbt, sigmoid


def matrix(X, y, groups=None, columns=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, m = X.shape
    columns = columns or [f"x{j}" for j in range(m)]
    return FeatureMatrix(
        X,
        columns,
        ["continuous"] * m,
        [{"source": c, "category": None} for c in columns],
        np.asarray(y),
        [f"r{i}" for i in range(n)],
        list(groups) if groups is not None else [f"g{i}" for i in range(n)],
    )


def noisy_problem(n=400, m=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, m))
    y = (X[:, 0] + 0.5 * X[:, 1] + rng.normal(scale=0.8, size=n) > 0.3).astype(int)
    return X, y


# -- gradient boosting --


def stump_oracle(X, y, lam):
    """Exhaustive Newton-gain search over every midpoint threshold of every feature."""
    p0 = y.mean()
    g = p0 - y
    h = np.full(len(y), p0 * (1 - p0))
    G, H = g.sum(), h.sum()
    best = (0.0, None, None)
    for j in range(X.shape[1]):
        values = np.unique(X[:, j])
        for t in (values[:-1] + values[1:]) / 2:
            left = X[:, j] <= t
            gain = 0.5 * (g[left].sum() ** 2 / (h[left].sum() + lam) + g[~left].sum() ** 2 / (h[~left].sum() + lam) - G * G / (H + lam))
            if gain > best[0] + 1e-12:
                left_value = -g[left].sum() / (h[left].sum() + lam)
                right_value = -g[~left].sum() / (h[~left].sum() + lam)
                best = (gain, (j, t), (left_value, right_value))
    return best


@pytest.mark.parametrize("seed", range(5))
def test_single_stump_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(60, 3)), 2)
    y = (X[:, seed % 3] + rng.normal(scale=0.7, size=60) > 0).astype(int)
    model = fit_gbt(X, y, GBTParams(n_trees=1, max_depth=1, learning_rate=1.0, l2_lambda=1.0))
    tree = model.trees[0]
    assert model.stage_losses[1] < model.stage_losses[0]  # no step halving happened
    _, (j, t), (lv, rv) = stump_oracle(X, y, 1.0)
    assert tree.feature[0] == j
    assert tree.threshold[0] == pytest.approx(t)
    assert tree.value[tree.left[0]] == pytest.approx(lv, abs=1e-12)
    assert tree.value[tree.right[0]] == pytest.approx(rv, abs=1e-12)


def test_base_score_is_prior_log_odds():
    X, y = noisy_problem()
    model = fit_gbt(X, y, GBTParams(n_trees=2))
    assert model.base_score == pytest.approx(math.log(y.mean() / (1 - y.mean())))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.integers(1, 4))
def test_stage_losses_never_increase(seed, lr, depth):
    X, y = noisy_problem(n=150, seed=seed)
    model = fit_gbt(X, y, GBTParams(n_trees=12, max_depth=depth, learning_rate=lr, l2_lambda=0.0))
    assert np.all(np.diff(model.stage_losses) <= 1e-12)
    assert all(t.depth <= depth for t in model.trees)


def test_gbt_rejects_bad_params():
    with pytest.raises(ValueError):
        train("gbt", {"max_depth": 0}, noisy_problem())
    with pytest.raises(ValueError):
        train("gbt", {"n_trees": 5, "bogus": 1}, noisy_problem())


def test_adaboost_one_stump_hand_example():
    # threshold 1.5 misclassifies only the last row: err = 1/5, vote weight ln 4
    X = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
    y = np.array([0, 0, 1, 1, 0])
    model = train("adaboost", {"n_stumps": 1}, (X, y))
    tree = model.trees[0]
    assert tree.threshold[0] == 1.5
    assert tree.value[tree.left[0]] == pytest.approx(-math.log(4))
    assert tree.value[tree.right[0]] == pytest.approx(math.log(4))
    assert predict_proba(model, X) == pytest.approx(sigmoid(np.array([-1, -1, 1, 1, 1]) * math.log(4)))


# -- logistic regression --


def test_logistic_separable_data():
    X = np.array([[-2.0], [-1.0], [-0.5], [0.5], [1.0], [2.0]])
    y = np.array([0, 0, 0, 1, 1, 1])
    model = train("logistic", {"l2": 1e-3}, (X, y))
    assert ((model.predict_proba(X) >= 0.5) == y).all()


def test_logistic_matches_grid_minimum():
    rng = np.random.default_rng(3)
    x = rng.normal(size=200)
    y = (x + rng.normal(size=200) > 0.2).astype(float)
    X = x[:, None]
    fit = fit_logistic(X, y, LogisticParams(l2=0.0, epochs=50_000, tol=1e-9))

    def loss(w, b):
        z = np.multiply.outer(w, x) + b[..., None]
        return np.mean(np.logaddexp(0, z) - y * z, axis=-1)

    # nested dense grids, each one centred on the previous minimum
    cw, cb, half = 0.0, 0.0, 4.0
    for _ in range(6):
        ws = np.linspace(cw - half, cw + half, 201)
        bs = np.linspace(cb - half, cb + half, 201)
        W, B = np.meshgrid(ws, bs, indexing="ij")
        i, j = np.unravel_index(np.argmin(loss(W, B)), W.shape)
        cw, cb, half = ws[i], bs[j], half / 20
    assert fit.weights[0] == pytest.approx(cw, abs=1e-4)
    assert fit.bias == pytest.approx(cb, abs=1e-4)


def test_logistic_gradient_finite_difference():
    X, y = noisy_problem(n=50)
    w = np.array([0.3, -0.2, 0.1])
    _, gw, gb = logistic_objective(w, 0.05, X, y.astype(float), 0.1)
    eps = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = eps
        num = (logistic_objective(w + e, 0.05, X, y, 0.1)[0] - logistic_objective(w - e, 0.05, X, y, 0.1)[0]) / (2 * eps)
        assert num == pytest.approx(gw[j], rel=1e-6)
    num_b = (logistic_objective(w, 0.05 + eps, X, y, 0.1)[0] - logistic_objective(w, 0.05 - eps, X, y, 0.1)[0]) / (2 * eps)
    assert num_b == pytest.approx(gb, rel=1e-6)


# -- MLP --


def test_mlp_gradient_finite_difference():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 4))
    y = rng.integers(0, 2, size=20).astype(float)
    model = init_mlp(4, 5, rng)
    model.b1 = rng.normal(scale=0.1, size=5)
    _, grad = loss_and_grad(model, X, y, l2=0.01)
    theta, analytic = model.flat(), grad.flat()
    eps = 1e-5
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = eps
        up = loss_and_grad(MLPModel.unflat(theta + e, 4, 5), X, y, 0.01)[0]
        down = loss_and_grad(MLPModel.unflat(theta - e, 4, 5), X, y, 0.01)[0]
        numeric = (up - down) / (2 * eps)
        assert abs(numeric - analytic[k]) <= 1e-4 * max(abs(numeric), abs(analytic[k]), 1e-8) + 1e-10


def test_mlp_learns_and_is_seeded():
    X, y = noisy_problem(n=600)
    a = train("mlp", {"hidden_units": 8, "epochs": 15}, (X, y), seed=1)
    b = train("mlp", {"hidden_units": 8, "epochs": 15}, (X, y), seed=1)
    assert np.array_equal(a.predict_proba(X), b.predict_proba(X))
    assert roc_auc(y, a.predict_proba(X)) > 0.8


# -- metrics --


def auc_all_pairs(y, s):
    pos = [v for v, t in zip(s, y) if t]
    neg = [v for v, t in zip(s, y) if not t]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return total / (len(pos) * len(neg))


def test_auc_hand_example():
    assert roc_auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75


def test_auc_single_class_is_none():
    assert roc_auc([1, 1], [0.2, 0.3]) is None
    assert average_precision([0, 0], [0.2, 0.3]) is None


@settings(max_examples=200)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 6)), min_size=2, max_size=40))
def test_auc_matches_all_pairs(rows):
    y = [r[0] for r in rows]
    s = [r[1] / 6 for r in rows]
    if all(y) or not any(y):
        return
    assert roc_auc(y, s) == pytest.approx(auc_all_pairs(y, s), abs=1e-12)


def test_average_precision_matches_sklearn():
    from sklearn.metrics import average_precision_score

    rng = np.random.default_rng(1)
    for _ in range(30):
        y = rng.integers(0, 2, size=80)
        s = np.round(rng.random(80), 1)  # plenty of ties
        if y.min() == y.max():
            continue
        assert average_precision(y, s) == pytest.approx(average_precision_score(y, s), abs=1e-12)


def test_binary_metrics_hand_example():
    m = binary_metrics([1, 1, 1, 0, 0, 0], [0.9, 0.6, 0.2, 0.7, 0.1, 0.3])
    assert m.accuracy == pytest.approx(4 / 6)
    assert (m.precision, m.recall) == pytest.approx((2 / 3, 2 / 3))
    assert m.f1 == pytest.approx(2 / 3)
    assert set(m.to_report()) == {"accuracy", "precision", "recall", "f1_score", "auc", "auc_pr"}


# -- splitting and oversampling --


def test_split_sizes_and_label_ratio():
    y = np.array([1] * 27 + [0] * 73)
    tr, te = split_indices(y, 0.8, seed=0)
    assert (len(tr), len(te)) == (80, 20)
    assert set(tr).isdisjoint(te)
    assert y[tr].sum() in (21, 22)
    assert y[te].sum() in (5, 6)


def test_split_ratio_must_be_proper():
    with pytest.raises(ValueError):
        split_indices(np.array([0, 1] * 10), 1.0)


def test_grouped_split_keeps_patients_together():
    rng = np.random.default_rng(0)
    groups = rng.integers(0, 120, size=500).astype(str)
    y = rng.random(500) < 0.3
    fm = matrix(rng.normal(size=(500, 2)), y.astype(int), groups)
    train_set, test_set = split_train_test(fm, 0.8, seed=2)
    assert set(train_set.groups).isdisjoint(test_set.groups)
    assert abs(len(train_set) / 500 - 0.8) < 0.05


def test_split_is_seeded():
    y = np.array([0, 1] * 50)
    assert np.array_equal(split_indices(y, 0.8, 4)[0], split_indices(y, 0.8, 4)[0])


def test_oversample_balances_classes():
    fm = matrix(np.arange(100.0), [1] * 27 + [0] * 73)
    out = oversample(fm, seed=0)
    assert np.bincount(out.y).tolist() == [73, 73]
    dup = out.origin >= 0
    assert dup.sum() == 46
    assert (fm.y[out.origin[dup]] == 1).all()
    assert np.array_equal(out.X[dup, 0], fm.X[out.origin[dup], 0])
    assert np.array_equal(out.X[:100], fm.X)


def test_evaluate_rejects_oversampled_rows():
    X, y = noisy_problem(n=100)
    fm = matrix(X, y)
    model = train("logistic", {}, fm)
    with pytest.raises(ValueError):
        evaluate(model, oversample(fm))
    assert evaluate(model, fm).n == 100


# -- grid search --


def test_single_candidate_grid():
    fm = matrix(*noisy_problem(n=200))
    best, score = grid_search("logistic", {"l2": [0.01]}, fm, folds=3)
    assert best == {"l2": 0.01}
    assert 0.5 < score <= 1.0


def test_grid_search_prefers_capacity_on_interactions():
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, size=(400, 2))
    y = ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)
    best, _ = grid_search("gbt", {"n_trees": [1, 30], "max_depth": [1, 3]}, matrix(X, y), folds=3)
    assert best == {"n_trees": 30, "max_depth": 3}


def test_grid_search_is_deterministic():
    fm = matrix(*noisy_problem(n=200))
    grid = {"n_trees": [5, 10], "max_depth": [2]}
    assert grid_search("gbt", grid, fm, seed=3) == grid_search("gbt", grid, fm, seed=3)


def test_degenerate_fold_warns_and_scores_half():
    X = np.arange(30.0)
    y = np.zeros(30, dtype=int)
    y[[3, 20]] = 1  # 2 positives over 3 folds: one validation fold has none
    with pytest.warns(UserWarning, match="single-class"):
        _, score = grid_search("logistic", {"l2": [0.1]}, matrix(X, y), folds=3)
    assert 0.0 <= score <= 1.0


def test_empty_grid_entry_rejected():
    with pytest.raises(ValueError):
        grid_search("logistic", {"l2": []}, matrix(*noisy_problem(n=60)))


# -- prediction and persistence --


def test_zero_logistic_predicts_half():
    model = TrainedModel("logistic", ["a", "b"], LogisticModel(np.zeros(2), 0.0))
    assert predict_proba(model, np.ones((3, 2))) == pytest.approx([0.5] * 3)


def test_single_leaf_ensemble():
    est = GBTModel([Tree.leaf_only(0.7)], base_score=-0.2, stage_losses=[1.0, 0.9])
    model = TrainedModel("gbt", ["a"], est)
    assert predict_proba(model, np.array([[5.0], [-5.0]])) == pytest.approx([sigmoid(0.5)] * 2)


@given(st.floats(-50, 50), st.floats(0, 10))
def test_logistic_proba_monotone(x, dx):
    model = TrainedModel("logistic", ["a"], LogisticModel(np.array([0.8]), -0.1))
    lo, hi = predict_proba(model, np.array([[x], [x + dx]]))
    assert 0.0 <= lo <= hi <= 1.0


@pytest.mark.parametrize(
    "family,hyper",
    [("gbt", {"n_trees": 5}), ("adaboost", {"n_stumps": 4}), ("logistic", {}), ("mlp", {"hidden_units": 4, "epochs": 2})],
)
def test_persistence_round_trip(tmp_path, family, hyper):
    X, y = noisy_problem(n=120)
    model = train(family, hyper, matrix(X, y))
    model.save(tmp_path / "m.json")
    back = TrainedModel.load(tmp_path / "m.json")
    assert back.family == family
    assert np.array_equal(back.predict_proba(X), model.predict_proba(X))


def test_column_mismatch_rejected():
    X, y = noisy_problem(n=80)
    model = train("logistic", {}, matrix(X, y))
    with pytest.raises(ValueError):
        model.predict_proba(matrix(X, y, columns=["x0", "x2", "x1"]))
    with pytest.raises(ValueError):
        model.predict_proba(X[:, :2])


def test_single_class_training_rejected():
    with pytest.raises(ValueError):
        train("logistic", {}, (np.zeros((5, 1)), np.zeros(5)))


def test_unsupported_format_version():
    with pytest.raises(ValueError):
        TrainedModel.from_dict({"format_version": 99})


def test_expand_grid_product():
    from edrk.learn.selection import expand_grid

    grid = {"a": [1, 2], "b": [3, 4, 5]}
    assert expand_grid(grid) == [dict(zip("ab", v)) for v in itertools.product([1, 2], [3, 4, 5])]
