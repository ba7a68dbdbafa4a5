import csv
import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest

from svcevo.explain import (
    decision_report, decision_report_for_lineage, dependence_data, dependence_from_phi, forest_shap,
    importance_heatmap, shap_values, tree_expectation, tree_shap, write_dependence, write_heatmap,
)
from svcevo.features import FEATURE_NAMES, SEQUENCE_COLUMNS
from svcevo.forest import DecisionTree, Forest, Hyperparameters, train

DATA = Path(__file__).parent / "data"
NF = len(SEQUENCE_COLUMNS)
CLASSES = ("continuing", "dissolving", "growing", "merging", "shrinking", "splitting")


# ---------------------------------------------------------------------------
# oracle: exhaustive-subset Shapley over the cover-conditional value function


def cond_expectation(tree, x, coalition, node=0):
    if tree.left[node] < 0:
        return tree.value[node]
    f = tree.feature[node]
    l, r = tree.left[node], tree.right[node]
    if f in coalition:
        return cond_expectation(tree, x, coalition, l if x[f] <= tree.threshold[node] else r)
    return (tree.cover[l] * cond_expectation(tree, x, coalition, l)
            + tree.cover[r] * cond_expectation(tree, x, coalition, r)) / tree.cover[node]


def brute_shapley(tree, x, n_features):
    active = sorted({int(f) for f in tree.feature[tree.left >= 0]})
    k = len(active)
    phi = np.zeros((n_features, tree.value.shape[1]))
    cache = {}

    def v(s):
        if s not in cache:
            cache[s] = cond_expectation(tree, x, s)
        return cache[s]

    for i in active:
        others = [f for f in active if f != i]
        for size in range(len(others) + 1):
            w = math.factorial(size) * math.factorial(k - size - 1) / math.factorial(k)
            for s in itertools.combinations(others, size):
                s = frozenset(s)
                phi[i] += w * (v(s | {i}) - v(s))
    return phi


def random_tree(rng, n_features=NF, n_active=10, depth=6, n_classes=3):
    active = rng.choice(n_features, size=n_active, replace=False)
    feature, threshold, left, right, cover, value = [], [], [], [], [], []

    def grow(c, d):
        i = len(feature)
        for lst in (feature, threshold, left, right, cover, value):
            lst.append(None)
        cover[i] = c
        if d == 0 or c < 2 or rng.random() < 0.2:
            feature[i], threshold[i], left[i], right[i] = -1, 0.0, -1, -1
            value[i] = rng.dirichlet(np.ones(n_classes))
            return i
        feature[i] = int(rng.choice(active))
        threshold[i] = float(rng.normal())
        cl = int(rng.integers(1, c))
        left[i] = grow(cl, d - 1)
        right[i] = grow(c - cl, d - 1)
        value[i] = (cover[left[i]] * value[left[i]] + cover[right[i]] * value[right[i]]) / c
        return i

    grow(int(rng.integers(20, 200)), depth)
    return DecisionTree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                        np.array(cover, float), np.vstack(value))


def stump(feature, thr, lv, rv, covers=(50.0, 50.0)):
    lv, rv = np.asarray(lv, float), np.asarray(rv, float)
    total = sum(covers)
    root = (covers[0] * lv + covers[1] * rv) / total
    return DecisionTree(np.array([feature, -1, -1]), np.array([thr, 0.0, 0.0]), np.array([1, -1, -1]),
                        np.array([2, -1, -1]), np.array([total, *covers]), np.vstack([root, lv, rv]))


def fitted_forest(seed=0, n=240, n_trees=12):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, len(CLASSES), n)
    X = rng.normal(size=(n, NF))
    X[:, 0] += y
    X[:, 16] -= 0.8 * (y % 3)
    X[:, 31] += 1.2 * (y % 2)
    labels = np.array([CLASSES[i] for i in y])
    return train(X, labels, Hyperparameters(n_trees=n_trees, seed=seed), classes=CLASSES), X, labels


# ---------------------------------------------------------------------------
# tree_shap


def test_single_leaf_tree():
    t = DecisionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([10.0]),
                     np.array([[0.3, 0.7]]))
    assert np.all(tree_shap(t, np.zeros(NF)) == 0.0)
    np.testing.assert_array_equal(tree_expectation(t), [0.3, 0.7])


def test_stump_example():
    t = stump(3, 0.0, [0.0], [1.0])
    x = np.zeros(NF)
    x[3] = 1.0
    phi = tree_shap(t, x)
    assert phi[3, 0] == pytest.approx(0.5, abs=1e-15)
    assert np.all(np.delete(phi[:, 0], 3) == 0.0)
    assert tree_expectation(t)[0] == pytest.approx(0.5, abs=1e-15)


def test_brute_force_oracle_on_random_trees():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        t = random_tree(rng)
        x = rng.normal(size=NF)
        diff = np.abs(tree_shap(t, x) - brute_shapley(t, x, NF)).max()
        worst = max(worst, diff)
    assert worst <= 1e-9


def test_zero_cover_rejected():
    t = stump(0, 0.0, [1.0], [0.0], covers=(5.0, 0.0))
    with pytest.raises(ValueError, match="zero cover"):
        tree_shap(t, np.zeros(4))


def test_dummy_feature_exactly_zero():
    rng = np.random.default_rng(5)
    for _ in range(10):
        t = random_tree(rng, n_features=20, n_active=5)
        unused = sorted(set(range(20)) - {int(f) for f in t.feature if f >= 0})
        phi = tree_shap(t, rng.normal(size=20))
        assert np.all(phi[unused] == 0.0)


def test_symmetry_of_duplicated_feature():
    # second tree is the first with features 0 and 1 swapped, so the forest treats them alike
    rng = np.random.default_rng(8)
    for _ in range(10):
        t = random_tree(rng, n_features=6, n_active=3)
        swapped = t.feature.copy()
        swapped[t.feature == 0], swapped[t.feature == 1] = 1, 0
        mirror = DecisionTree(swapped, t.threshold, t.left, t.right, t.cover, t.value)
        f = Forest([t, mirror], ("a", "b", "c"), 6)
        x = rng.normal(size=6)
        x[1] = x[0]
        phi, _ = shap_values(f, x)
        np.testing.assert_allclose(phi[0, 0], phi[0, 1], atol=1e-12)


# ---------------------------------------------------------------------------
# forest_shap


def test_local_accuracy_fitted_forest():
    f, X, _ = fitted_forest()
    phi, base = shap_values(f, X[:60])
    P = f.predict_proba(X[:60])
    assert np.abs(base + phi.sum(axis=1) - P).max() <= 1e-6
    for e in forest_shap(f, X[7]):
        assert abs(e.base_value + e.phi.sum() - e.prediction) <= 1e-6


def test_base_value_is_cover_weighted_expectation():
    f, _, _ = fitted_forest(n_trees=3)
    _, base = shap_values(f, np.zeros((1, NF)))
    oracle = np.mean([cond_expectation(t, None, frozenset()) for t in f.trees], axis=0)
    np.testing.assert_allclose(base, oracle, atol=1e-12)


def test_two_tree_hand_forest():
    t1 = stump(0, 0.0, [1.0, 0.0], [0.0, 1.0])             # covers 50/50
    t2 = stump(1, 0.0, [0.5, 0.5], [0.0, 1.0], (75.0, 25.0))
    f = Forest([t1, t2], ("a", "b"), 3)
    x = np.array([1.0, 1.0, 0.0])
    phi, base = shap_values(f, x)
    # t1: right branch, phi0 = (0,1) - (0.5,0.5); t2: right branch, phi1 = (0,1) - (0.375,0.625)
    np.testing.assert_allclose(phi[0, 0], [-0.25, 0.25], atol=1e-15)
    np.testing.assert_allclose(phi[0, 1], [-0.1875, 0.1875], atol=1e-15)
    np.testing.assert_array_equal(phi[0, 2], [0.0, 0.0])
    np.testing.assert_allclose(base, [0.4375, 0.5625], atol=1e-15)


def test_pure_function():
    f, X, _ = fitted_forest(n_trees=4)
    a = forest_shap(f, X[3])
    b = forest_shap(f, X[3].copy())
    for ea, eb in zip(a, b):
        np.testing.assert_array_equal(ea.phi, eb.phi)


# ---------------------------------------------------------------------------
# aggregates


def test_heatmap_single_sample(tmp_path):
    f, X, _ = fitted_forest(n_trees=4)
    h = importance_heatmap(f, X[:1])
    phi, _ = shap_values(f, X[:1])
    for j in range(len(CLASSES)):
        np.testing.assert_array_equal(h.values[j].ravel(), np.abs(phi[0, :, j]))
    assert np.all(h.values >= 0)
    write_heatmap(h, tmp_path / "h.csv")
    rows = list(csv.reader((tmp_path / "h.csv").open()))
    assert rows[0] == ["class", "timestep", "feature", "mean_abs_shap"]
    assert len(rows) == 1 + len(CLASSES) * NF


def test_heatmap_batch_matches_recomputation():
    f, X, _ = fitted_forest(n_trees=4)
    h = importance_heatmap(f, X[:10])
    acc = np.zeros((len(CLASSES), NF))
    for x in X[:10]:
        for j, e in enumerate(forest_shap(f, x)):
            acc[j] += np.abs(e.phi)
    np.testing.assert_allclose(h.values.reshape(len(CLASSES), NF), acc / 10, atol=1e-15)


def test_dependence_two_samples_by_hand(tmp_path):
    X = np.zeros((2, NF))
    phi = np.zeros((2, NF, 2))
    f = FEATURE_NAMES.index("activity_mean")
    for i in range(2):
        for k in range(3):
            X[i, 15 * k + f] = 10 * i + k + 1
            phi[i, 15 * k + f, 1] = 0.1 * (k + 1) * (i + 1)
    rows = dependence_from_phi(("a", "dissolving"), X, phi, ["x", "y"], "activity_mean", "dissolving")
    assert rows[0] == {"x": 1.0, "y": pytest.approx(0.6), "delta1": 1.0, "delta2": 1.0, "label": "x"}
    assert rows[1]["x"] == 11.0 and rows[1]["y"] == pytest.approx(1.2)
    zero = dependence_from_phi(("a", "dissolving"), X, phi, None, "activity_mean", "a")
    assert all(r["y"] == 0.0 for r in zero)
    write_dependence(rows, tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "x,y,delta1,delta2,label"


def test_dependence_errors():
    f, X, _ = fitted_forest(n_trees=2)
    with pytest.raises(ValueError, match="unknown feature"):
        dependence_data(f, X[:2], "no_such", "dissolving")
    with pytest.raises(ValueError, match="unknown class"):
        dependence_data(f, X[:2], "activity_mean", "exploding")


def test_uniform_model_zero_dependence():
    t = DecisionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([4.0]),
                     np.array([[0.5, 0.5]]))
    f = Forest([t], ("a", "dissolving"), NF)
    rows = dependence_data(f, np.ones((3, NF)), "activity_mean", "dissolving")
    assert [r["y"] for r in rows] == [0.0] * 3


# ---------------------------------------------------------------------------
# decision report


def test_decision_report_contract():
    f, X, _ = fitted_forest()
    rep = decision_report(f, X[0], top_k=5, lineage_id="L1", t=4)
    probs = [e["probability"] for e in rep["events"].values()]
    assert sum(probs) == pytest.approx(1.0, abs=1e-12) and len(probs) == 6
    for e in rep["events"].values():
        mags = [abs(c["phi"]) for c in e["contributors"]]
        assert mags == sorted(mags, reverse=True) and len(mags) == 5
        assert all(c["phi"] > 0 for c in e["top_positive"])
        assert all(c["phi"] < 0 for c in e["top_negative"])
        assert all(c["feature"] in SEQUENCE_COLUMNS for c in e["contributors"])


def test_short_lineage_rejected():
    f, X, _ = fitted_forest(n_trees=2)
    with pytest.raises(ValueError, match="too short"):
        decision_report_for_lineage(f, [X[0, :15], X[0, 15:30]], lineage_id="L9")


def test_lineage_report_uses_last_three_snapshots():
    f, X, _ = fitted_forest(n_trees=3)
    chain = [np.full(15, 9.0), X[1, :15], X[1, 15:30], X[1, 30:]]
    assert decision_report_for_lineage(f, chain) == decision_report(f, X[1])


def test_decision_report_golden():
    f, X, _ = fitted_forest(seed=11, n_trees=10)
    rep = decision_report(f, X[5], top_k=5, lineage_id="golden", t=3)
    golden = json.loads((DATA / "decision_report_golden.json").read_text())
    assert rep["lineage_id"] == golden["lineage_id"] and rep["t"] == golden["t"]
    for cls, e in golden["events"].items():
        got = rep["events"][cls]
        assert got["probability"] == pytest.approx(e["probability"], abs=1e-12)
        assert got["expected_value"] == pytest.approx(e["expected_value"], abs=1e-12)
        for key in ("contributors", "top_positive", "top_negative"):
            assert [c["feature"] for c in got[key]] == [c["feature"] for c in e[key]]
            for a, b in zip(got[key], e[key]):
                assert a["phi"] == pytest.approx(b["phi"], abs=1e-12) and a["value"] == b["value"]
