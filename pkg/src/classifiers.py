"""Final-classification models and evaluation metrics.

A Random Forest of Gini decision trees grown from scratch, plus the
precision / recall / F-measure / ROC helpers shared by the trainer and the
evaluation commands.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import rankdata

from src.errors import DimensionMismatchError

logger = logging.getLogger(__name__)

FOREST_FORMAT = "random-forest"
FOREST_VERSION = 1
DECISION_POINT = 0.5
LEAF = -1


# --- metrics ----------------------------------------------------------------


def f_measure(precision: float, recall: float) -> float:
    """Balanced F-measure 2PR/(P+R); 0 when P + R = 0."""
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return f_measure(precision, recall)


@dataclass(frozen=True)
class EvaluationMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    tpr: float
    fpr: float
    roc_area: float

    @property
    def correctly_classified(self) -> int:
        return self.tp + self.tn

    @property
    def incorrectly_classified(self) -> int:
        return self.fp + self.fn

    def as_row(self) -> dict[str, float | int]:
        row = asdict(self)
        row["correctly_classified"] = self.correctly_classified
        row["incorrectly_classified"] = self.incorrectly_classified
        return row


def _check_truth(scores: Sequence, truth: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    scores_array = np.asarray(scores, dtype=float)
    truth_array = np.asarray(truth, dtype=np.int64)
    if len(scores_array) != len(truth_array):
        raise ValueError(f"{len(scores_array)} predictions but {len(truth_array)} truth labels")
    if len(truth_array) == 0:
        raise ValueError("cannot evaluate an empty prediction set")
    if not np.isin(truth_array, (0, 1)).all():
        raise ValueError("truth labels must be 0 or 1")
    return scores_array, truth_array


def roc_area(scores: Sequence[float], truth: Sequence[int]) -> float:
    """Area under the ROC curve by the rank-sum statistic (ties count one half)."""
    scores_array, truth_array = _check_truth(scores, truth)
    n_pos = int(truth_array.sum())
    n_neg = len(truth_array) - n_pos
    if n_pos == 0 or n_neg == 0:
        logger.warning("truth holds a single class, ROC area is undefined; reporting 0.5")
        return 0.5
    ranks = rankdata(scores_array)
    u = ranks[truth_array == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], truth: Sequence[int]) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) points, one per distinct score, starting at (0, 0, +inf)."""
    scores_array, truth_array = _check_truth(scores, truth)
    n_pos = int(truth_array.sum())
    n_neg = len(truth_array) - n_pos
    points = [(0.0, 0.0, math.inf)]
    for threshold in np.unique(scores_array)[::-1]:
        predicted = scores_array >= threshold
        tp = int(np.sum(predicted & (truth_array == 1)))
        fp = int(np.sum(predicted & (truth_array == 0)))
        points.append((fp / n_neg if n_neg else 0.0, tp / n_pos if n_pos else 0.0, float(threshold)))
    return points


def evaluate(predictions: Sequence[tuple[int, float]], truth: Sequence[int]) -> EvaluationMetrics:
    """Confusion counts, precision, recall, F-measure, TPR/FPR and ROC area."""
    labels = np.asarray([label for label, _ in predictions], dtype=np.int64)
    scores, truth_array = _check_truth([score for _, score in predictions], truth)
    tp = int(np.sum((labels == 1) & (truth_array == 1)))
    fp = int(np.sum((labels == 1) & (truth_array == 0)))
    tn = int(np.sum((labels == 0) & (truth_array == 0)))
    fn = int(np.sum((labels == 0) & (truth_array == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return EvaluationMetrics(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        precision=precision,
        recall=recall,
        f1=f_measure(precision, recall),
        tpr=recall,
        fpr=fp / (fp + tn) if fp + tn else 0.0,
        roc_area=roc_area(scores, truth_array),
    )


# --- data -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if len(features) != len(labels):
            raise ValueError(f"{len(features)} rows but {len(labels)} labels")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[Sequence[float], int]]) -> LabeledDataset:
        if not rows:
            raise ValueError("a dataset needs at least one row")
        return cls(np.array([x for x, _ in rows], dtype=float), np.array([y for _, y in rows]))

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices: np.ndarray) -> LabeledDataset:
        return LabeledDataset(self.features[indices], self.labels[indices])


# --- forest -----------------------------------------------------------------


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 1
    features_per_split: int | None = None
    seed: int = 0
    bootstrap: bool = True

    def split_width(self, dim: int) -> int:
        width = self.features_per_split or math.ceil(math.sqrt(dim))
        if not 1 <= width <= dim:
            raise ValueError(f"features_per_split must lie in [1, {dim}], got {width}")
        return width

    def validate(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")


@dataclass
class DecisionTree:
    """Array-encoded binary tree; node 0 is the root.

    `feature[i] == LEAF` marks a leaf whose class probabilities are
    `probabilities[i]`. Internal nodes send x to `left[i]` when
    `x[feature[i]] <= threshold[i]`.
    """

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    probabilities: list[tuple[float, float]] = field(default_factory=list)

    def _new_node(self) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.probabilities.append((0.0, 0.0))
        return len(self.feature) - 1

    def positive_probability(self, x: np.ndarray) -> float:
        node = 0
        while self.feature[node] != LEAF:
            node = self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]
        return self.probabilities[node][1]

    def __len__(self) -> int:
        return len(self.feature)


def _gini(positives: np.ndarray, totals: np.ndarray) -> np.ndarray:
    p = positives / totals
    return 2.0 * p * (1.0 - p)


def best_split(
    features: np.ndarray, labels: np.ndarray, candidates: Sequence[int], min_leaf: int
) -> tuple[int, float, float] | None:
    """Lowest weighted Gini split over the candidate features.

    Thresholds are midpoints between adjacent distinct values. Ties go to
    the lowest feature index, then the lowest threshold. Returns
    (feature, threshold, impurity) or None when no split leaves at least
    `min_leaf` rows on each side.
    """
    n = len(labels)
    best: tuple[int, float, float] | None = None
    for feature in sorted(candidates):
        order = np.argsort(features[:, feature], kind="stable")
        values = features[order, feature]
        left_pos = np.cumsum(labels[order])[:-1].astype(float)
        left_n = np.arange(1, n, dtype=float)
        right_n = n - left_n
        right_pos = labels.sum() - left_pos
        valid = (values[:-1] < values[1:]) & (left_n >= min_leaf) & (right_n >= min_leaf)
        if not valid.any():
            continue
        impurity = (left_n * _gini(left_pos, left_n) + right_n * _gini(right_pos, right_n)) / n
        impurity = np.where(valid, impurity, np.inf)
        i = int(np.argmin(impurity))
        if best is None or impurity[i] < best[2]:
            best = (int(feature), float((values[i] + values[i + 1]) / 2.0), float(impurity[i]))
    return best


def grow_tree(data: LabeledDataset, params: ForestParams, seed: np.random.SeedSequence) -> DecisionTree:
    rng = np.random.default_rng(seed)
    n = len(data)
    rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
    width = params.split_width(data.dim)
    tree = DecisionTree()
    stack = [(tree._new_node(), rows, 0)]
    while stack:
        node, node_rows, depth = stack.pop()
        labels = data.labels[node_rows]
        positive = float(labels.mean())
        tree.probabilities[node] = (1.0 - positive, positive)
        if positive in (0.0, 1.0) or (params.max_depth is not None and depth >= params.max_depth):
            continue
        candidates = rng.choice(data.dim, size=width, replace=False)
        split = best_split(data.features[node_rows], labels, candidates, params.min_leaf)
        if split is None:
            continue
        feature, threshold, _ = split
        goes_left = data.features[node_rows, feature] <= threshold
        tree.feature[node] = feature
        tree.threshold[node] = threshold
        tree.left[node] = tree._new_node()
        tree.right[node] = tree._new_node()
        stack.append((tree.right[node], node_rows[~goes_left], depth + 1))
        stack.append((tree.left[node], node_rows[goes_left], depth + 1))
    return tree


@dataclass
class RandomForestModel:
    trees: list[DecisionTree]
    params: ForestParams
    n_features: int

    @property
    def dim(self) -> int:
        return self.n_features

    def score(self, x: Sequence[float]) -> float:
        vector = np.asarray(x, dtype=float)
        if vector.shape != (self.n_features,):
            raise DimensionMismatchError(f"forest expects {self.n_features} features, got {vector.shape}")
        return float(np.mean([tree.positive_probability(vector) for tree in self.trees]))

    def predict(self, x: Sequence[float]) -> tuple[int, float]:
        score = self.score(x)
        return int(score >= DECISION_POINT), score


def train_random_forest(
    data: LabeledDataset, params: ForestParams = ForestParams(), jobs: int = 1
) -> RandomForestModel:
    """Bagged Gini trees; every tree draws from its own spawned seed so results do not depend on `jobs`."""
    params.validate()
    params.split_width(data.dim)
    if len(np.unique(data.labels)) < 2:
        raise ValueError("training data must contain both classes")
    seeds = np.random.SeedSequence(params.seed).spawn(params.n_trees)
    trees = Parallel(n_jobs=jobs)(delayed(grow_tree)(data, params, s) for s in seeds)
    logger.debug("grew %d trees on %d rows of dimension %d", len(trees), len(data), data.dim)
    return RandomForestModel(list(trees), params, data.dim)


def predict(model: RandomForestModel, x: Sequence[float]) -> tuple[int, float]:
    return model.predict(x)


def cross_validate(
    data: LabeledDataset, params: ForestParams = ForestParams(), folds: int = 10, seed: int = 0, jobs: int = 1
) -> list[tuple[int, float]]:
    """Out-of-fold (label, score) for every row, folds stratified by class."""
    if folds < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(data), dtype=np.int64)
    for label in (0, 1):
        members = np.flatnonzero(data.labels == label)
        if len(members) < folds:
            raise ValueError(f"class {label} has {len(members)} rows, fewer than {folds} folds")
        assignment[rng.permutation(members)] = np.arange(len(members)) % folds

    out: list[tuple[int, float]] = [(0, 0.0)] * len(data)
    for fold in range(folds):
        held_out = np.flatnonzero(assignment == fold)
        train = data.take(np.flatnonzero(assignment != fold))
        model = train_random_forest(train, replace(params, seed=params.seed + fold), jobs)
        for i in held_out:
            out[i] = model.predict(data.features[i])
    return out


# --- serialization ----------------------------------------------------------


def forest_to_dict(model: RandomForestModel) -> dict[str, Any]:
    return {
        "format": FOREST_FORMAT,
        "version": FOREST_VERSION,
        "dim": model.n_features,
        "params": asdict(model.params),
        "trees": [
            {
                "feature": tree.feature,
                "threshold": tree.threshold,
                "left": tree.left,
                "right": tree.right,
                "probabilities": [list(p) for p in tree.probabilities],
            }
            for tree in model.trees
        ],
    }


def forest_from_dict(document: dict[str, Any]) -> RandomForestModel:
    if document.get("format") != FOREST_FORMAT or document.get("version") != FOREST_VERSION:
        raise ValueError(f"not a {FOREST_FORMAT} v{FOREST_VERSION} document")
    trees = [
        DecisionTree(
            feature=[int(f) for f in t["feature"]],
            threshold=[float(v) for v in t["threshold"]],
            left=[int(i) for i in t["left"]],
            right=[int(i) for i in t["right"]],
            probabilities=[(float(p[0]), float(p[1])) for p in t["probabilities"]],
        )
        for t in document["trees"]
    ]
    return RandomForestModel(trees, ForestParams(**document["params"]), int(document["dim"]))
