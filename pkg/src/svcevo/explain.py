"""Shapley attributions for forest predictions and the reports built on them.

Values are exact for the path-dependent value function: a feature outside the
coalition sends the traversal down both children, weighted by training cover.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .features import FEATURE_NAMES, SEQUENCE_COLUMNS, TIMESTEPS
from .forest import DecisionTree, Forest


@dataclass(frozen=True)
class Explanation:
    cls: str
    base_value: float
    phi: np.ndarray
    prediction: float


def tree_expectation(tree: DecisionTree) -> np.ndarray:
    """Cover-weighted expected output of ``tree`` (one value per class)."""
    e = tree.value.astype(float).copy()
    for i in range(tree.n_nodes - 1, -1, -1):
        if tree.left[i] >= 0:
            l, r = tree.left[i], tree.right[i]
            e[i] = (tree.cover[l] * e[l] + tree.cover[r] * e[r]) / tree.cover[i]
    return e[0]


def tree_shap(tree: DecisionTree, x, n_features: int | None = None) -> np.ndarray:
    """Shapley values of one tree at ``x``, shape (n_features, n_classes)."""
    if np.any(tree.cover <= 0):
        raise ValueError("malformed tree: node with zero cover")
    x = np.asarray(x, dtype=float)
    n_features = len(x) if n_features is None else n_features
    phi = np.zeros((n_features, tree.value.shape[1]))
    if tree.n_nodes > 1:
        kernels.tree_shap_kernel(tree.left, tree.right, tree.feature, tree.threshold, tree.cover,
                                 np.ascontiguousarray(tree.value), x, phi, tree.max_depth())
    return phi


def shap_values(forest: Forest, X) -> tuple[np.ndarray, np.ndarray]:
    """Mean tree attributions for each row of ``X``.

    Returns ``(phi, base)`` with phi of shape (n_samples, n_features, n_classes)
    and base of shape (n_classes,).
    """
    X = forest._check(X)
    phi = np.zeros((len(X), forest.n_features, len(forest.classes)))
    base = np.zeros(len(forest.classes))
    for tree in forest.trees:
        base += tree_expectation(tree)
        for i, x in enumerate(X):
            phi[i] += tree_shap(tree, x, forest.n_features)
    k = len(forest.trees)
    return phi / k, base / k


def forest_shap(forest: Forest, x) -> list[Explanation]:
    phi, base = shap_values(forest, x)
    proba = forest.predict_proba(x)[0]
    return [Explanation(c, float(base[j]), phi[0, :, j].copy(), float(proba[j]))
            for j, c in enumerate(forest.classes)]


# ---------------------------------------------------------------------------
# aggregate reports


@dataclass(frozen=True)
class ImportanceSummary:
    classes: tuple[str, ...]
    values: np.ndarray  # (n_classes, 3 timesteps, 15 features), mean |phi|

    def rows(self):
        for j, c in enumerate(self.classes):
            for k, step in enumerate(TIMESTEPS):
                for f, name in enumerate(FEATURE_NAMES):
                    yield c, step, name, float(self.values[j, k, f])


def importance_from_phi(classes, phi: np.ndarray) -> ImportanceSummary:
    if len(phi) == 0:
        raise ValueError("need at least one sample")
    mean_abs = np.abs(phi).mean(axis=0)  # (45, C)
    values = mean_abs.T.reshape(len(classes), len(TIMESTEPS), len(FEATURE_NAMES))
    return ImportanceSummary(tuple(classes), values)


def importance_heatmap(forest: Forest, X) -> ImportanceSummary:
    phi, _ = shap_values(forest, X)
    return importance_from_phi(forest.classes, phi)


def write_heatmap(summary: ImportanceSummary, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "timestep", "feature", "mean_abs_shap"])
        for c, step, name, v in summary.rows():
            w.writerow([c, step, name, repr(v)])


def dependence_from_phi(classes, X, phi, labels, feature: str, cls: str) -> list[dict]:
    if feature not in FEATURE_NAMES:
        raise ValueError(f"unknown feature {feature!r}")
    j = list(classes).index(cls)
    f = FEATURE_NAMES.index(feature)
    cols = [k * len(FEATURE_NAMES) + f for k in range(len(TIMESTEPS))]
    X = np.atleast_2d(X)
    rows = []
    for i in range(len(X)):
        v2, v1, v0 = (X[i, c] for c in cols)
        rows.append({
            "x": float(v2),
            "y": float(sum(phi[i, c, j] for c in cols)),
            "delta1": float(v1 - v2),
            "delta2": float(v0 - v1),
            "label": labels[i] if labels is not None else "",
        })
    return rows


def dependence_data(forest: Forest, X, feature: str, cls: str, labels: Sequence[str] | None = None) -> list[dict]:
    """Summed attribution of one feature over the three timesteps, against its oldest value."""
    if feature not in FEATURE_NAMES:
        raise ValueError(f"unknown feature {feature!r}")
    if cls not in forest.classes:
        raise ValueError(f"unknown class {cls!r}")
    phi, _ = shap_values(forest, X)
    return dependence_from_phi(forest.classes, X, phi, labels, feature, cls)


def write_dependence(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "delta1", "delta2", "label"])
        for r in rows:
            w.writerow([repr(r["x"]), repr(r["y"]), repr(r["delta1"]), repr(r["delta2"]), r["label"]])


def _column_names(n):
    return list(SEQUENCE_COLUMNS) if n == len(SEQUENCE_COLUMNS) else [f"x{i}" for i in range(n)]


def decision_report(forest: Forest, x, top_k: int = 5, lineage_id: str = "", t: int | None = None) -> dict:
    """Per-event probabilities with the strongest contributing features."""
    x = np.asarray(x, dtype=float)
    if x.shape != (forest.n_features,):
        raise ValueError("decision report needs one full three-step window")
    names = _column_names(forest.n_features)
    events = {}
    for e in forest_shap(forest, x):
        order = sorted(range(len(e.phi)), key=lambda i: (-abs(e.phi[i]), i))
        entry = lambda i: {"feature": names[i], "value": float(x[i]), "phi": float(e.phi[i])}
        pos = [i for i in order if e.phi[i] > 0][:top_k]
        neg = [i for i in order if e.phi[i] < 0][:top_k]
        events[e.cls] = {
            "probability": e.prediction,
            "expected_value": e.base_value,
            "contributors": [entry(i) for i in order[:top_k]],
            "top_positive": [entry(i) for i in pos],
            "top_negative": [entry(i) for i in neg],
        }
    return {"lineage_id": lineage_id, "t": t, "events": events}


def decision_report_for_lineage(forest: Forest, chain_features: Sequence[np.ndarray], top_k: int = 5,
                                lineage_id: str = "", t: int | None = None) -> dict:
    if len(chain_features) < 3:
        raise ValueError(f"lineage {lineage_id or '?'} is too short: need 3 snapshots, have {len(chain_features)}")
    x = np.concatenate(list(chain_features[-3:]))
    return decision_report(forest, x, top_k=top_k, lineage_id=lineage_id, t=t)
