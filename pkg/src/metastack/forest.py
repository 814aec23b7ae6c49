"""Random forest classifier built on the compiled CART kernels, plus grid
search over (n_estimators, max_depth) with exact prefix/depth sharing."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import DataError
from .metrics import confusion, mcc

FULL_GRID_VALUES = (25, 50, 100, 200, 300)

_FOREST_FORMAT = "metastack-forest/1"


@dataclass(frozen=True)
class ForestParams:
    n_estimators: int
    max_depth: int
    features_per_split: int | str = "sqrt"  # "sqrt", "all", or an explicit count
    min_samples_leaf: int = 1
    class_weights: tuple[float, ...] | None = None
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_estimators < 1:
            raise DataError("n_estimators must be positive")
        if self.max_depth < 1:
            raise DataError("max_depth must be positive")
        if self.min_samples_leaf < 1:
            raise DataError("min_samples_leaf must be positive")

    def resolve_mtry(self, n_features: int) -> int:
        if self.features_per_split == "sqrt":
            return max(1, int(math.isqrt(n_features)))
        if self.features_per_split == "all":
            return n_features
        m = int(self.features_per_split)
        if not 1 <= m <= n_features:
            raise DataError(f"features_per_split {m} outside [1, {n_features}]")
        return m


@dataclass(frozen=True)
class ParamGrid:
    """Cartesian hyperparameter grid over estimator count and tree depth."""

    n_estimators: tuple[int, ...] = FULL_GRID_VALUES
    max_depth: tuple[int, ...] = FULL_GRID_VALUES

    def __post_init__(self):
        if not self.n_estimators or not self.max_depth:
            raise DataError("grid must be non-empty")

    def cells(self) -> list[tuple[int, int]]:
        return [(e, d) for e in self.n_estimators for d in self.max_depth]


FULL_GRID = ParamGrid()
REDUCED_GRID = ParamGrid(n_estimators=(25, 50), max_depth=(10, 25))


@dataclass
class TreeNode:
    """Recursive node view: a split (column, threshold, children) or a leaf
    carrying per-class sample counts."""

    class_counts: tuple[int, ...]
    column: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.column is None


class DecisionTree:
    """One trained tree stored as flat node arrays."""

    def __init__(self, feature, threshold, left, right, counts, n_classes):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right
        self.counts = counts
        self.n_classes = n_classes

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        best = 0
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
            best = max(best, int(depths[node]))
        return best

    @property
    def root(self) -> TreeNode:
        def build(node: int) -> TreeNode:
            if self.feature[node] < 0:
                return TreeNode(class_counts=tuple(int(c) for c in self.counts[node]))
            return TreeNode(
                class_counts=tuple(int(c) for c in self.counts[node]),
                column=int(self.feature[node]),
                threshold=float(self.threshold[node]),
                left=build(int(self.left[node])),
                right=build(int(self.right[node])),
            )

        return build(0)

    def apply(self, X: np.ndarray, depth_cap: int | None = None) -> np.ndarray:
        cap = depth_cap if depth_cap is not None else 1 << 30
        return _kernels.tree_apply(
            np.ascontiguousarray(X, dtype=np.float64),
            self.feature,
            self.threshold,
            self.left,
            self.right,
            cap,
        )

    def leaf_distribution(self, x: Sequence[float]) -> np.ndarray:
        node = int(self.apply(np.asarray(x, dtype=np.float64).reshape(1, -1))[0])
        c = self.counts[node].astype(np.float64)
        return c / c.sum()


def _tree_seed(seed: int, index: int) -> np.uint64:
    return np.uint64(_kernels.mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(index)))


def train_tree(X, y, params: ForestParams, seed: int | None = None) -> DecisionTree:
    """Grow a single tree (no bootstrap unless params say so)."""
    X, y, n_classes = _check_xy(X, y)
    mtry = params.resolve_mtry(X.shape[1])
    weights = _weights_vector(params, n_classes)
    Xc = np.ascontiguousarray(X.T)
    arrays = _kernels.build_tree(
        Xc,
        y,
        np.arange(X.shape[0], dtype=np.int64),
        n_classes,
        params.max_depth,
        params.min_samples_leaf,
        mtry,
        np.uint64((params.seed if seed is None else seed) & 0xFFFFFFFFFFFFFFFF),
        params.bootstrap,
        weights,
    )
    return DecisionTree(*arrays, n_classes=n_classes)


def _check_xy(X, y):
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("training data must be a non-empty 2-d matrix")
    if len(y) != X.shape[0]:
        raise DataError("one label per row required")
    if np.isnan(X).any():
        raise DataError("training data contains missing cells; impute first")
    n_classes = max(2, int(y.max()) + 1 if len(y) else 0)
    if n_classes > 16:
        raise DataError("at most 16 classes supported")
    return X, y.astype(np.int8), n_classes


def _weights_vector(params: ForestParams, n_classes: int) -> np.ndarray:
    if params.class_weights is None:
        return np.ones(n_classes, dtype=np.float64)
    if len(params.class_weights) != n_classes:
        raise DataError("one class weight per class required")
    w = np.asarray(params.class_weights, dtype=np.float64)
    if (w <= 0).any():
        raise DataError("class weights must be positive")
    return w


class ForestModel:
    """Bagged ensemble of CART trees with probability output.

    Per-tree seeds derive from (seed, tree index) and per-node feature draws
    from the node's path, so a (t, d) prefix/depth view of a larger model is
    identical to a model trained at (t, d) directly.
    """

    def __init__(
        self,
        params: ForestParams,
        classes: tuple[str, ...],
        feature_width: int,
        trees: list[DecisionTree],
    ):
        if len(trees) != params.n_estimators:
            raise DataError("tree count must equal n_estimators")
        self.params = params
        self.classes = classes
        self.feature_width = feature_width
        self._trees = trees
        self._offsets = np.cumsum([0] + [t.n_nodes for t in trees]).astype(np.int64)
        self._feature = np.concatenate([t.feature for t in trees])
        self._threshold = np.concatenate([t.threshold for t in trees])
        self._left = np.concatenate([t.left for t in trees])
        self._right = np.concatenate([t.right for t in trees])
        self._counts = np.vstack([t.counts for t in trees])

    @property
    def trees(self) -> list[DecisionTree]:
        return list(self._trees)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def predict_proba_matrix(
        self,
        X: np.ndarray,
        n_trees: int | None = None,
        depth_cap: int | None = None,
    ) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.feature_width:
            raise DataError(
                f"expected (n, {self.feature_width}) feature matrix, got {X.shape}"
            )
        cuts = np.array([n_trees or self.params.n_estimators], dtype=np.int64)
        out = _kernels.forest_proba_at_cuts(
            X,
            self._offsets,
            self._feature,
            self._threshold,
            self._left,
            self._right,
            self._counts,
            cuts,
            depth_cap if depth_cap is not None else 1 << 30,
            self.n_classes,
            _weights_vector(self.params, self.n_classes),
        )
        return out[0]

    def proba_at_cuts(self, X, cuts: Sequence[int], depth_cap: int) -> np.ndarray:
        """(len(cuts), n, classes) probabilities at increasing tree counts."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _kernels.forest_proba_at_cuts(
            X,
            self._offsets,
            self._feature,
            self._threshold,
            self._left,
            self._right,
            self._counts,
            np.asarray(cuts, dtype=np.int64),
            depth_cap,
            self.n_classes,
            _weights_vector(self.params, self.n_classes),
        )

    def predict_labels(self, X: np.ndarray) -> np.ndarray:
        """Argmax labels; ties resolve to the lowest class index."""
        return np.argmax(self.predict_proba_matrix(X), axis=1)

    def to_json(self) -> str:
        doc = {
            "format": _FOREST_FORMAT,
            "params": {
                "n_estimators": self.params.n_estimators,
                "max_depth": self.params.max_depth,
                "features_per_split": self.params.features_per_split,
                "min_samples_leaf": self.params.min_samples_leaf,
                "class_weights": list(self.params.class_weights)
                if self.params.class_weights
                else None,
                "seed": self.params.seed,
                "bootstrap": self.params.bootstrap,
            },
            "classes": list(self.classes),
            "feature_width": self.feature_width,
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "counts": t.counts.tolist(),
                }
                for t in self._trees
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        doc = json.loads(text)
        if doc.get("format") != _FOREST_FORMAT:
            raise DataError(f"unknown model format: {doc.get('format')!r}")
        p = doc["params"]
        params = ForestParams(
            n_estimators=p["n_estimators"],
            max_depth=p["max_depth"],
            features_per_split=p["features_per_split"],
            min_samples_leaf=p["min_samples_leaf"],
            class_weights=tuple(p["class_weights"]) if p["class_weights"] else None,
            seed=p["seed"],
            bootstrap=p["bootstrap"],
        )
        classes = tuple(doc["classes"])
        trees = [
            DecisionTree(
                np.asarray(t["feature"], dtype=np.int32),
                np.asarray(t["threshold"], dtype=np.float64),
                np.asarray(t["left"], dtype=np.int32),
                np.asarray(t["right"], dtype=np.int32),
                np.asarray(t["counts"], dtype=np.int64),
                n_classes=len(classes),
            )
            for t in doc["trees"]
        ]
        return cls(params, classes, doc["feature_width"], trees)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def train_forest(
    X,
    y,
    params: ForestParams,
    classes: Sequence[str] | None = None,
) -> ForestModel:
    """Bootstrap-bagged forest; deterministic in params.seed."""
    X, y8, n_classes = _check_xy(X, y)
    if classes is None:
        classes = tuple(f"class {c}" for c in range(n_classes))
    if len(classes) < n_classes:
        raise DataError("class list smaller than the largest label")
    mtry = params.resolve_mtry(X.shape[1])
    weights = _weights_vector(params, len(classes))
    Xc = np.ascontiguousarray(X.T)
    sample = np.arange(X.shape[0], dtype=np.int64)
    trees = []
    for t in range(params.n_estimators):
        arrays = _kernels.build_tree(
            Xc,
            y8,
            sample,
            len(classes),
            params.max_depth,
            params.min_samples_leaf,
            mtry,
            _tree_seed(params.seed, t),
            params.bootstrap,
            weights,
        )
        trees.append(DecisionTree(*arrays, n_classes=len(classes)))
    return ForestModel(params, tuple(classes), X.shape[1], trees)


def predict_proba(model: ForestModel, x: Sequence[float]) -> np.ndarray:
    """Per-class probability vector for one item."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.feature_width,):
        raise DataError(f"expected {model.feature_width} features, got {x.shape}")
    return model.predict_proba_matrix(x.reshape(1, -1))[0]


def stratified_fold_ids(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Per-item fold assignment, class-balanced, deterministic in seed."""
    if k < 2:
        raise DataError("need at least 2 folds")
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=np.int64)
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        rng.shuffle(members)
        fold[members] = np.arange(len(members)) % k
    return fold


@dataclass(frozen=True)
class GridCell:
    n_estimators: int
    max_depth: int
    mean_metric: float
    fold_metrics: tuple[float, ...]


@dataclass(frozen=True)
class GridSearchResult:
    best: ForestParams
    table: tuple[GridCell, ...]
    warnings: tuple[str, ...]

    def cell(self, n_estimators: int, max_depth: int) -> GridCell:
        for c in self.table:
            if c.n_estimators == n_estimators and c.max_depth == max_depth:
                return c
        raise KeyError((n_estimators, max_depth))


def grid_search(
    grid: ParamGrid,
    X,
    y,
    inner_folds: int = 2,
    metric: Callable | None = None,
    base_params: ForestParams | None = None,
    seed: int = 0,
    classes: Sequence[str] | None = None,
) -> GridSearchResult:
    """Stratified k-fold mean metric per grid cell.

    One forest per fold is trained at (max estimators, max depth); every cell
    is evaluated from tree-prefix and depth-capped views, which matches
    training each cell separately because of the path-derived node seeds.
    Ties break toward fewer estimators, then smaller depth.
    """
    if inner_folds < 2:
        raise DataError("inner_folds must be at least 2")
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    base = base_params or ForestParams(1, 1)
    if classes is None:
        classes = tuple(f"class {c}" for c in range(max(2, int(y.max()) + 1)))
    metric_fn = metric or (lambda yt, yp: mcc(confusion(yt, yp, classes)))

    est_cuts = tuple(sorted(set(grid.n_estimators)))
    depths = tuple(sorted(set(grid.max_depth)))
    cap_est = est_cuts[-1]
    cap_depth = depths[-1]

    fold_ids = stratified_fold_ids(y, inner_folds, seed)
    notes: list[str] = []
    # scores[(est, depth)] -> list of per-fold metric values
    scores: dict[tuple[int, int], list[float]] = {
        cell: [] for cell in grid.cells()
    }
    for f in range(inner_folds):
        train_idx = np.flatnonzero(fold_ids != f)
        val_idx = np.flatnonzero(fold_ids == f)
        y_val = y[val_idx]
        if len(np.unique(y[train_idx])) < 2 or len(np.unique(y_val)) < 2:
            msg = f"fold {f} has a single class; its metric is recorded as 0"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
            for cell in scores:
                scores[cell].append(0.0)
            continue
        shared = train_forest(
            X[train_idx],
            y[train_idx],
            replace(base, n_estimators=cap_est, max_depth=cap_depth,
                    seed=_derive_fold_seed(seed, f)),
            classes=classes,
        )
        for d in depths:
            probs = shared.proba_at_cuts(X[val_idx], est_cuts, depth_cap=d)
            for ci, e in enumerate(est_cuts):
                y_hat = np.argmax(probs[ci], axis=1)
                scores[(e, d)].append(float(metric_fn(y_val, y_hat)))
    table = tuple(
        GridCell(e, d, float(np.mean(scores[(e, d)])), tuple(scores[(e, d)]))
        for e, d in grid.cells()
    )
    ordered = sorted(table, key=lambda c: (c.n_estimators, c.max_depth))
    best_cell = ordered[0]
    for c in ordered[1:]:
        if c.mean_metric > best_cell.mean_metric:
            best_cell = c
    best = replace(base, n_estimators=best_cell.n_estimators, max_depth=best_cell.max_depth)
    return GridSearchResult(best=best, table=table, warnings=tuple(notes))


def _derive_fold_seed(seed: int, fold: int) -> int:
    return int(_kernels.mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(0xF0 + fold))) & (
        (1 << 63) - 1
    )
