from __future__ import annotations

import itertools
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from edrk.attribution import (
    ImportanceRanking,
    PathDependentExplainer,
    TreeEnsemble,
    brute_force_shapley,
    global_importance,
    group_shap,
    importance_svg,
    linear_shap,
    tree_shap,
)
from edrk.learn import TrainedModel, train
from edrk.learn.linear import LogisticModel
from edrk.learn.trees import Tree


def hand_tree():
    # x0 <= .5 -> 0 ; else (x1 <= .5 -> 1 ; else 3)
    return Tree(
        feature=np.array([0, -1, 1, -1, -1]),
        threshold=np.array([0.5, 0, 0.5, 0, 0]),
        left=np.array([1, -1, 3, -1, -1]),
        right=np.array([2, -1, 4, -1, -1]),
        value=np.array([0.0, 0.0, 0.0, 1.0, 3.0]),
        cover=np.array([8.0, 4, 4, 2, 2]),
    )


CUBE = np.array(list(itertools.product([0.0, 1.0], repeat=3)))


def test_hand_computed_cube():
    # every corner of the 2^3 cube as background: each split sends half the rows each way
    # v({})=1, v({0})=2, v({1})=1.5, v({0,1})=3 for x=(1,1,1)
    ens = TreeEnsemble([hand_tree()], 0.0, 3)
    phi, base = tree_shap(ens, np.array([[1.0, 1.0, 1.0]]), CUBE)
    assert base == pytest.approx(1.0)
    assert phi[0] == pytest.approx([1.25, 0.75, 0.0])


def test_hand_cube_all_corners_against_enumeration():
    ens = TreeEnsemble([hand_tree()], 0.0, 3)
    phi, base = tree_shap(ens, CUBE, CUBE)
    bf, bf_base = brute_force_shapley(ens, CUBE, CUBE)
    assert np.allclose(phi, bf, atol=1e-12)
    assert base == pytest.approx(bf_base)


def test_single_leaf_tree():
    ens = TreeEnsemble([Tree.leaf_only(0.4)], base_score=-1.0, n_features=2)
    phi, base = tree_shap(ens, np.array([[3.0, 4.0]]))
    assert base == pytest.approx(-0.6)
    assert np.all(phi == 0)


def test_stump_attribution():
    # background split 3:1 at the root; x goes right
    stump = Tree(np.array([1, -1, -1]), np.array([0.0, 0, 0]), np.array([1, -1, -1]), np.array([2, -1, -1]),
                 np.array([0.0, -1.0, 2.0]), np.array([4.0, 3, 1]))
    ens = TreeEnsemble([stump], 0.0, 2)
    phi, base = tree_shap(ens, np.array([[0.0, 5.0]]))
    assert base == pytest.approx(0.75 * -1 + 0.25 * 2)
    assert phi[0] == pytest.approx([0.0, 2.0 - base])


@pytest.mark.parametrize("seed", range(200))
def test_random_ensembles_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 7))
    X = np.round(rng.normal(size=(80, m)), 1)
    y = (X[:, 0] * X[:, -1] + rng.normal(scale=0.5, size=80) > 0).astype(int)
    if y.min() == y.max():
        y[0] = 1 - y[0]
    depth = int(rng.integers(1, 5))
    model = train("gbt", {"n_trees": 3, "max_depth": depth, "learning_rate": 0.5}, (X, y))
    samples = X[:4]
    background = X if seed % 2 else None
    phi, base = tree_shap(model, samples, background)
    bf, bf_base = brute_force_shapley(model, samples, background)
    assert np.max(np.abs(phi - bf)) < 1e-10
    assert base == pytest.approx(bf_base, abs=1e-12)


def test_additivity_and_dummy_features():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 5))
    X[:, 4] = 0.0  # constant column can never be split on
    y = (X[:, 0] + X[:, 1] ** 2 > 0.8).astype(int)
    model = train("gbt", {"n_trees": 20, "max_depth": 3}, (X, y))
    explainer = PathDependentExplainer(model, X)
    phi = explainer.shap_values(X[:50])
    assert np.allclose(phi.sum(axis=1) + explainer.base_value, model.margin(X[:50]), atol=1e-10)
    assert np.all(phi[:, 4] == 0)
    vec = explainer.explain(X[:1], "s1")
    assert vec.to_dict()["sample_id"] == "s1"


def test_adaboost_is_explainable():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(120, 3))
    y = (X[:, 2] > 0.1).astype(int)
    model = train("adaboost", {"n_stumps": 5}, (X, y))
    phi, base = tree_shap(model, X[:10], X)
    assert np.allclose(phi.sum(axis=1) + base, model.margin(X[:10]), atol=1e-10)


def test_non_tree_model_refused_by_tree_shap():
    model = TrainedModel("logistic", ["a"], LogisticModel(np.array([1.0]), 0.0))
    with pytest.raises(ValueError):
        tree_shap(model, np.zeros((1, 1)))


def test_linear_shap_hand_example():
    model = LogisticModel(np.array([2.0, -1.0]), 0.5)
    phi, base = linear_shap(model, np.array([1.0, 3.0]), np.array([0.0, 1.0]))
    assert phi[0] == pytest.approx([2.0, -2.0])
    assert base == pytest.approx(-0.5)


def test_linear_shap_matches_enumeration_with_eight_features():
    rng = np.random.default_rng(4)
    model = LogisticModel(rng.normal(size=8), 0.3)
    background = rng.normal(size=(25, 8))
    x = rng.normal(size=(3, 8))
    phi, base = linear_shap(model, x, background.mean(axis=0))
    bf, bf_base = brute_force_shapley(model, x, background)
    assert np.allclose(phi, bf, atol=1e-10)
    assert base == pytest.approx(bf_base)


def test_brute_force_refuses_many_features():
    ens = TreeEnsemble([Tree.leaf_only(0.0)], 0.0, 16)
    with pytest.raises(ValueError):
        brute_force_shapley(ens, np.zeros((1, 16)))


def test_width_mismatch_rejected():
    ens = TreeEnsemble([hand_tree()], 0.0, 3)
    with pytest.raises(ValueError):
        tree_shap(ens, np.zeros((1, 2)))
    with pytest.raises(ValueError):
        tree_shap(ens, np.zeros((1, 3)), np.zeros((0, 3)))


def test_global_importance_order():
    phi = np.array([[1.0, -2.0, 0.5], [-3.0, 0.0, -0.5]])
    ranking = global_importance(phi, ["a", "b", "c"])
    assert ranking.items == [("a", 2.0), ("b", 1.0), ("c", 0.5)]


def test_global_importance_ties_by_name():
    ranking = global_importance(np.array([[1.0, -1.0]]), ["zeta", "alpha"])
    assert ranking.names() == ["alpha", "zeta"]


def test_group_shap_sums_one_hot_columns():
    meta = [{"source": "age"}, {"source": "race", "category": "A"}, {"source": "race", "category": "B"}, {"source": "esi"}]
    grouped, sources = group_shap(np.array([[0.1, 0.2, -0.5, 1.0]]), meta)
    assert sources == ["age", "race", "esi"]
    assert grouped[0] == pytest.approx([0.1, -0.3, 1.0])


def test_importance_svg():
    ranking = ImportanceRanking([("esi_level", 0.4), ("age_years", 0.2), ("race", 0.1)])
    svg = importance_svg(ranking, labels={"esi_level": "Acuity <ESI>"}, top=2)
    root = ET.fromstring(svg)
    rects = [el for el in root.iter() if el.tag.endswith("rect")]
    widths = [float(r.get("width")) for r in rects]
    assert len(rects) == 2
    assert widths[0] > widths[1]
    assert "Acuity &lt;ESI&gt;" in svg
