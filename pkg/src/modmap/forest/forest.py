"""Random forest training, evaluation, grid search, and serialization."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import LeakageError, ValidationError
from ..featurize import FeatureLayout
from .tree import DecisionTree, fit_tree

MODEL_SCHEMA_VERSION = 1

DEFAULT_GRID_N_TREES = (50, 100, 200, 400)
DEFAULT_GRID_MAX_DEPTH = (2, 4, 8, 16, None)


@dataclass(frozen=True)
class ForestHyperparams:
    n_trees: int = 100
    max_depth: int | None = None
    features_per_split: int | None = None  # None -> ceil(sqrt(d))
    bootstrap: bool = True
    balanced: bool = True

    def resolve_features_per_split(self, d: int) -> int:
        if self.features_per_split is not None:
            return min(self.features_per_split, d)
        return min(math.ceil(math.sqrt(d)), d)


@dataclass
class RandomForestModel:
    trees: list[DecisionTree]
    hyper: ForestHyperparams
    seed: int
    layout: FeatureLayout
    modality_name: str
    n_features: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)


@dataclass
class EvalResult:
    accuracy: float
    majority_baseline: float
    n: int
    confusion: list[list[int]]  # [[tn, fp], [fn, tp]]
    majority_tie: bool = False


@dataclass
class GridPoint:
    index: int
    hyper: ForestHyperparams
    val_accuracy: float


def gini(counts) -> float:
    """Gini impurity 1 - sum(p_c^2) of weighted class counts."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("class counts must be nonnegative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("class counts must not all be zero")
    p = counts / total
    return float(1.0 - np.sum(p * p))


def balanced_weights(labels) -> np.ndarray:
    """Per-sample weights N / (2 * N_c), equalizing total class weight."""
    y = np.asarray(labels, dtype=bool)
    n = y.shape[0]
    n_pos = int(y.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("balanced weights need at least one sample of each class")
    w = np.where(y, n / (2.0 * n_pos), n / (2.0 * n_neg))
    return w


def _tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    # per-tree substream: independent of training order or parallel schedule
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, tree_index])))


def _max_workers() -> int:
    env = os.environ.get("MODMAP_THREADS")
    if env:
        return max(1, int(env))
    return min(os.cpu_count() or 1, 8)


def fit_forest(X, y, hyper: ForestHyperparams, seed: int, layout: FeatureLayout,
               modality_name: str = "", sample_weight=None) -> RandomForestModel:
    """Train n_trees trees, each on a same-size bootstrap resample."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    n, d = X.shape
    if n < 1:
        raise ValidationError("cannot train a forest on an empty training set")
    if sample_weight is not None:
        w = np.asarray(sample_weight, dtype=np.float64)
    elif hyper.balanced:
        w = balanced_weights(y)
    else:
        w = np.ones(n)
    if np.any(w <= 0):
        raise ValidationError("sample weights must be positive")
    m = hyper.resolve_features_per_split(d)
    yf = y.astype(np.float64)

    def fit_one(t: int) -> DecisionTree:
        rng = _tree_rng(seed, t)
        if hyper.bootstrap:
            bidx = rng.integers(0, n, size=n)
            Xb, yb, wb = X[bidx], yf[bidx], w[bidx]
        else:
            Xb, yb, wb = X, yf, w
        return fit_tree(Xb, yb, wb, hyper.max_depth, m, rng)

    workers = _max_workers()
    if workers > 1 and hyper.n_trees > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(fit_one, range(hyper.n_trees)))
    else:
        trees = [fit_one(t) for t in range(hyper.n_trees)]
    return RandomForestModel(trees=trees, hyper=hyper, seed=seed, layout=layout,
                             modality_name=modality_name, n_features=d)


def predict(model: RandomForestModel, X) -> tuple[np.ndarray, np.ndarray]:
    """(labels, scores): score is the mean leaf posterior, label = score >= 0.5."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.n_features:
        raise ValueError(
            f"feature width {X.shape[1]} does not match model layout "
            f"({model.layout.variant}, width {model.n_features})")
    scores = np.zeros(X.shape[0])
    for tree in model.trees:
        scores += tree.scores(X)
    scores /= model.n_trees
    return scores >= 0.5, scores


def evaluate(model: RandomForestModel, X, y) -> EvalResult:
    y = np.asarray(y, dtype=bool)
    if y.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty set")
    pred, _ = predict(model, X)
    acc = float(np.mean(pred == y))
    n_pos = int(y.sum())
    n_neg = y.shape[0] - n_pos
    tie = n_pos == n_neg
    majority = 0.5 if tie else max(n_pos, n_neg) / y.shape[0]
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tp = int(np.sum(pred & y))
    return EvalResult(accuracy=acc, majority_baseline=float(majority), n=y.shape[0],
                      confusion=[[tn, fp], [fn, tp]], majority_tie=tie)


def default_grid() -> list[ForestHyperparams]:
    return [ForestHyperparams(n_trees=t, max_depth=d)
            for t in DEFAULT_GRID_N_TREES for d in DEFAULT_GRID_MAX_DEPTH]


def grid_search(X_train, y_train, train_ids, X_val, y_val, val_ids,
                grid, seed: int, layout: FeatureLayout,
                modality_name: str = "") -> tuple[RandomForestModel, list[GridPoint]]:
    """Train one model per grid point; pick the best validation accuracy.

    Ties break toward fewer trees, then smaller depth, then lower grid index.
    """
    if not grid:
        raise ValueError("empty hyperparameter grid")
    overlap = set(train_ids) & set(val_ids)
    if overlap:
        raise LeakageError(f"train/val overlap: {sorted(overlap)[:5]}")
    leaderboard = []
    best = None
    best_key = None
    best_model = None
    for i, hyper in enumerate(grid):
        model = fit_forest(X_train, y_train, hyper, seed, layout, modality_name)
        acc = evaluate(model, X_val, y_val).accuracy
        leaderboard.append(GridPoint(index=i, hyper=hyper, val_accuracy=acc))
        depth = hyper.max_depth if hyper.max_depth is not None else math.inf
        key = (-acc, hyper.n_trees, depth, i)
        if best_key is None or key < best_key:
            best_key = key
            best = leaderboard[-1]
            best_model = model
    return best_model, leaderboard


def save_model(model: RandomForestModel, path) -> None:
    obj = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "modality": model.modality_name,
        "seed": model.seed,
        "n_features": model.n_features,
        "layout": model.layout.to_dict(),
        "hyper": {
            "n_trees": model.hyper.n_trees,
            "max_depth": model.hyper.max_depth,
            "features_per_split": model.hyper.features_per_split,
            "bootstrap": model.hyper.bootstrap,
            "balanced": model.hyper.balanced,
        },
        "trees": [t.to_dict() for t in model.trees],
    }
    with Path(path).open("w") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_model(path) -> RandomForestModel:
    with Path(path).open() as fh:
        obj = json.load(fh)
    if obj.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ValidationError(
            f"{path}: model schema_version {obj.get('schema_version')} unsupported")
    hyper = ForestHyperparams(**obj["hyper"])
    return RandomForestModel(
        trees=[DecisionTree.from_dict(t) for t in obj["trees"]],
        hyper=hyper, seed=obj["seed"],
        layout=FeatureLayout.from_dict(obj["layout"]),
        modality_name=obj["modality"], n_features=obj["n_features"])
