"""CART-style decision tree used inside the forest.

Nodes are stored as parallel arrays; ``feature == -1`` marks a leaf. Fitting
is iterative (explicit stack, depth-first, left child first) so unlimited
depth cannot hit the recursion limit, and the per-node RNG consumption order
is fixed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

UNLIMITED_DEPTH = np.iinfo(np.int32).max


@dataclass
class DecisionTree:
    feature: np.ndarray    # int32, -1 for leaves
    threshold: np.ndarray  # float64
    left: np.ndarray       # int32
    right: np.ndarray      # int32
    w_neg: np.ndarray      # float64, weighted class counts at each node
    w_pos: np.ndarray
    max_depth: int | None

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def leaf_posteriors(self) -> np.ndarray:
        return self.w_pos / (self.w_pos + self.w_neg)

    def scores(self, X: np.ndarray) -> np.ndarray:
        """Positive-class posterior of the leaf each row lands in."""
        return kernels.tree_scores(self.feature, self.threshold, self.left,
                                   self.right, self.leaf_posteriors(),
                                   np.ascontiguousarray(X, dtype=np.float64))

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "w_neg": self.w_neg.tolist(),
            "w_pos": self.w_pos.tolist(),
            "max_depth": self.max_depth,
        }

    @classmethod
    def from_dict(cls, obj) -> "DecisionTree":
        return cls(
            feature=np.asarray(obj["feature"], dtype=np.int32),
            threshold=np.asarray(obj["threshold"], dtype=np.float64),
            left=np.asarray(obj["left"], dtype=np.int32),
            right=np.asarray(obj["right"], dtype=np.int32),
            w_neg=np.asarray(obj["w_neg"], dtype=np.float64),
            w_pos=np.asarray(obj["w_pos"], dtype=np.float64),
            max_depth=obj["max_depth"],
        )


def fit_tree(X, y, w, max_depth, features_per_split, rng) -> DecisionTree:
    """Grow one tree by greedy weighted-Gini splits.

    At each node, features_per_split feature indices are drawn without
    replacement; the best midpoint threshold among them is accepted only if
    it strictly decreases weighted Gini. rng draws happen in a fixed
    depth-first, left-first order.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    n, d = X.shape
    if n < 1:
        raise ValueError("cannot fit a tree on zero samples")
    depth_cap = UNLIMITED_DEPTH if max_depth is None else int(max_depth)
    m = min(int(features_per_split), d)

    feature, threshold = [], []
    left, right = [], []
    w_neg, w_pos = [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        w_neg.append(0.0)
        w_pos.append(0.0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(n, dtype=np.int64), 0)]
    while stack:
        node, idx, depth = stack.pop()
        wt = w[idx]
        w_tot = float(wt.sum())
        wp = float((wt * y[idx]).sum())
        w_neg[node] = w_tot - wp
        w_pos[node] = wp
        if depth >= depth_cap or wp <= 0.0 or wp >= w_tot or idx.shape[0] < 2:
            continue
        if m < d:
            feats = np.sort(rng.choice(d, size=m, replace=False)).astype(np.int64)
        else:
            feats = np.arange(d, dtype=np.int64)
        f, thr, child_score = kernels.best_split(X, y, w, idx, feats)
        parent_score = w_tot * kernels.node_gini(wp, w_tot)
        if f < 0 or not child_score < parent_score:
            continue
        go_left = X[idx, f] <= thr
        feature[node] = int(f)
        threshold[node] = float(thr)
        left_id = new_node()
        right_id = new_node()
        left[node] = left_id
        right[node] = right_id
        # push right first so the left child is processed (and draws rng) first
        stack.append((right_id, idx[~go_left], depth + 1))
        stack.append((left_id, idx[go_left], depth + 1))

    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        w_neg=np.asarray(w_neg, dtype=np.float64),
        w_pos=np.asarray(w_pos, dtype=np.float64),
        max_depth=max_depth,
    )
