"""Random forest of CART trees with soft voting, plus the comparison baselines."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels

FORMAT_TAG = "svcevo-forest"
FORMAT_VERSION = 1


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 2
    features_per_split: int | None = None  # floor(sqrt(n_features)) when unset
    seed: int = 0
    class_weighting: str = "balanced"  # or "none"
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be >= 1")
        if self.class_weighting not in ("balanced", "none"):
            raise ValueError("class_weighting must be 'balanced' or 'none'")


@dataclass(eq=False)
class DecisionTree:
    """Flat binary tree. Leaves have ``left == right == -1``; ``x[f] <= threshold`` goes left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    cover: np.ndarray
    value: np.ndarray  # (n_nodes, n_classes), class distribution at every node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.left < 0

    def max_depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):  # children always follow their parent
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.left[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            cur = node[rows]
            go_left = X[rows, self.feature[cur]] <= self.threshold[cur]
            node[rows] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.left[node] >= 0
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(np.atleast_2d(X))]

    def validate(self) -> None:
        internal = self.left >= 0
        if np.any(self.cover <= 0):
            raise ValueError("tree has a node with zero cover")
        kids = self.cover[self.left[internal]] + self.cover[self.right[internal]]
        if not np.allclose(kids, self.cover[internal], rtol=0, atol=1e-9):
            raise ValueError("children covers do not add up to their parent's")

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "cover": self.cover.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=float),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["cover"], dtype=float),
            np.asarray(d["value"], dtype=float).reshape(len(d["feature"]), -1),
        )


@dataclass(eq=False)
class Forest:
    trees: list[DecisionTree]
    classes: tuple[str, ...]
    n_features: int
    params: Hyperparameters = field(default_factory=Hyperparameters)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("inputs must be finite")
        return X

    def predict_proba(self, X) -> np.ndarray:
        X = self._check(X)
        total = np.zeros((len(X), len(self.classes)))
        for tree in self.trees:
            total += tree.predict_proba(X)
        return total / len(self.trees)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return np.asarray(self.classes, dtype=object)[np.argmax(proba, axis=1)]

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "version": FORMAT_VERSION,
            "classes": list(self.classes),
            "n_features": self.n_features,
            "hyperparameters": asdict(self.params),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        if d.get("format") != FORMAT_TAG or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a forest model file (format tag/version mismatch)")
        return cls(
            [DecisionTree.from_dict(t) for t in d["trees"]],
            tuple(d["classes"]),
            int(d["n_features"]),
            Hyperparameters(**d["hyperparameters"]),
        )


def save_forest(forest: Forest, path) -> None:
    text = json.dumps(forest.to_dict(), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_forest(path) -> Forest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing model file: {path}")
    return Forest.from_dict(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# training


def class_weights(y: np.ndarray, n_classes: int, scheme: str) -> np.ndarray:
    if scheme == "none":
        return np.ones(n_classes)
    counts = np.bincount(y, minlength=n_classes)
    present = counts > 0
    w = np.zeros(n_classes)
    w[present] = len(y) / (present.sum() * counts[present])
    return w


def _grow_tree(X, y, sw, sample_idx, n_classes, params: Hyperparameters, max_features, rng) -> DecisionTree:
    feature, threshold, left, right, cover, value = [], [], [], [], [], []
    n_features = X.shape[1]
    min_leaf = params.min_samples_leaf

    def grow(idx, depth):
        node = len(feature)
        counts = np.bincount(y[idx], weights=sw[idx], minlength=n_classes)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        cover.append(float(len(idx)))
        value.append(counts / counts.sum())
        if (
            (params.max_depth is not None and depth >= params.max_depth)
            or len(idx) < 2 * min_leaf
            or np.count_nonzero(counts) <= 1
        ):
            return node
        order = rng.permutation(n_features)
        f, thr, _ = kernels.best_split(X, y, sw, idx, order, counts, n_classes, min_leaf, max_features)
        if f < 0:
            return node
        go_left = X[idx, f] <= thr
        feature[node] = int(f)
        threshold[node] = float(thr)
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.asarray(sample_idx, dtype=np.int64), 0)
    return DecisionTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(cover, dtype=float),
        np.vstack(value),
    )


def train(X, y: Sequence[str], params: Hyperparameters = Hyperparameters(),
          classes: Sequence[str] | None = None, threads: int = 1) -> Forest:
    """Fit a forest on rows of ``X`` labelled by class names ``y``."""
    X = np.ascontiguousarray(X, dtype=float)
    y = list(y)
    if len(y) == 0:
        raise TrainingError("empty training set")
    if X.ndim != 2 or X.shape[0] != len(y):
        raise TrainingError("X must be 2-D with one row per label")
    if classes is None:
        classes = sorted(set(y))
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    unknown = sorted(set(y) - set(index))
    if unknown:
        raise TrainingError(f"labels outside the class set: {unknown}")
    yi = np.array([index[c] for c in y], dtype=np.int64)
    if len(np.unique(yi)) < 2:
        raise TrainingError("training set has a single class")
    if len(y) < 2 * params.min_samples_leaf:
        raise TrainingError("too few samples for min_samples_leaf")

    n, n_features = X.shape
    max_features = params.features_per_split or max(1, math.isqrt(n_features))
    max_features = min(max_features, n_features)
    sw = class_weights(yi, len(classes), params.class_weighting)[yi]
    seeds = np.random.SeedSequence(params.seed).spawn(params.n_trees)

    def fit_one(seq):
        rng = np.random.default_rng(seq)
        idx = rng.integers(0, n, n) if params.bootstrap else np.arange(n)
        return _grow_tree(X, yi, sw, idx, len(classes), params, max_features, rng)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(fit_one, seeds))
    else:
        trees = [fit_one(s) for s in seeds]
    return Forest(trees, classes, n_features, params)


def train_decision_tree(X, y, params: Hyperparameters = Hyperparameters(), classes=None) -> Forest:
    """Single CART tree on the full training set, every feature considered per split."""
    X = np.asarray(X, dtype=float)
    single = Hyperparameters(
        n_trees=1, max_depth=params.max_depth, min_samples_leaf=params.min_samples_leaf,
        features_per_split=X.shape[1], seed=params.seed, class_weighting=params.class_weighting,
        bootstrap=False,
    )
    return train(X, y, single, classes=classes)


# ---------------------------------------------------------------------------
# baselines and metrics


@dataclass(frozen=True)
class MajorityClassifier:
    classes: tuple[str, ...]
    modal: str

    def predict(self, X) -> np.ndarray:
        return np.full(len(np.atleast_2d(X)), self.modal, dtype=object)

    def predict_proba(self, X) -> np.ndarray:
        out = np.zeros((len(np.atleast_2d(X)), len(self.classes)))
        out[:, self.classes.index(self.modal)] = 1.0
        return out


def majority_baseline(y: Sequence[str], classes: Sequence[str] | None = None) -> MajorityClassifier:
    """Predict the most frequent training class; ties go to the smallest name."""
    if len(y) == 0:
        raise TrainingError("empty training set")
    counts: dict[str, int] = {}
    for label in y:
        counts[label] = counts.get(label, 0) + 1
    modal = min(counts, key=lambda c: (-counts[c], c))
    return MajorityClassifier(tuple(classes) if classes else tuple(sorted(counts)), modal)


@dataclass
class Metrics:
    classes: tuple[str, ...]
    precision: dict[str, float | None]
    recall: dict[str, float | None]
    f1: dict[str, float | None]
    support: dict[str, int]
    macro_f1: float
    accuracy: float
    confusion: np.ndarray  # rows: true class, columns: predicted class


def evaluate_predictions(y_true: Sequence[str], y_pred: Sequence[str], classes: Sequence[str]) -> Metrics:
    """One-vs-rest precision/recall/F1.

    A class with neither instances nor predictions is undefined (``None``) and
    left out of the macro average. A zero denominator otherwise scores 0.
    """
    if len(y_true) == 0:
        raise ValueError("cannot evaluate on an empty set")
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        conf[index[t], index[p]] += 1
    prec, rec, f1, support = {}, {}, {}, {}
    for i, c in enumerate(classes):
        tp = conf[i, i]
        n_pred = conf[:, i].sum()
        n_true = conf[i, :].sum()
        support[c] = int(n_true)
        if n_pred == 0 and n_true == 0:
            prec[c] = rec[c] = f1[c] = None
            continue
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_true if n_true else 0.0
        prec[c], rec[c] = float(p), float(r)
        f1[c] = float(2 * p * r / (p + r)) if p + r > 0 else 0.0
    defined = [v for v in f1.values() if v is not None]
    return Metrics(classes, prec, rec, f1, support, float(np.mean(defined)),
                   float(np.trace(conf) / conf.sum()), conf)


def evaluate(model, X, y: Sequence[str], classes: Sequence[str] | None = None) -> Metrics:
    classes = tuple(classes or model.classes)
    return evaluate_predictions(list(y), list(model.predict(X)), classes)


def majority_macro_f1(test_labels: Sequence[str], modal: str) -> float:
    """Closed-form macro-F1 of always predicting ``modal``."""
    n = len(test_labels)
    present = set(test_labels) | {modal}
    share = sum(1 for t in test_labels if t == modal) / n
    f1_modal = 2 * share / (1 + share) if share > 0 else 0.0
    return f1_modal / len(present)


def stratified_split(labels: Sequence[str], test_fraction: float = 0.2, seed: int = 0):
    """Per-class shuffled split; returns sorted (train, test) index arrays."""
    rng = np.random.default_rng(seed)
    labels = list(labels)
    train_idx, test_idx = [], []
    for c in sorted(set(labels)):
        idx = np.array([i for i, t in enumerate(labels) if t == c], dtype=np.int64)
        idx = idx[rng.permutation(len(idx))]
        k = int(math.floor(len(idx) * test_fraction + 0.5))
        test_idx.extend(idx[:k].tolist())
        train_idx.extend(idx[k:].tolist())
    return np.array(sorted(train_idx), dtype=np.int64), np.array(sorted(test_idx), dtype=np.int64)
