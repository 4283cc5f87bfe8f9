"""Hot kernels for tree fitting and traversal.

Two interchangeable backends: numba @njit loops (default) and a pure-numpy
vectorized path. Select with MODMAP_BACKEND=numba|numpy; the numpy path is
also the automatic fallback when numba is unavailable.

Both backends implement the same split rule: candidate thresholds are
midpoints between consecutive distinct sorted values, the accepted split
minimizes total weighted child Gini, and ties are broken by lowest feature
index then lowest threshold (features are scanned in ascending index order,
thresholds ascending, and only strict improvements are taken).
"""
from __future__ import annotations

import os

import numpy as np

__all__ = ["BACKEND", "best_split", "tree_scores"]


def _gini_pair(w_pos: float, w_tot: float) -> float:
    p = w_pos / w_tot
    q = (w_tot - w_pos) / w_tot
    return 1.0 - p * p - q * q


# --- pure numpy backend ----------------------------------------------------

def _best_split_numpy(X, y, w, idx, feats):
    n = idx.shape[0]
    w_node = w[idx]
    wy_node = w_node * y[idx]
    best_score = np.inf
    best_feat = -1
    best_thr = 0.0
    for f in feats:
        vals = X[idx, f]
        order = np.argsort(vals, kind="mergesort")
        sv = vals[order]
        cw = np.cumsum(w_node[order])
        cwp = np.cumsum(wy_node[order])
        w_tot = cw[-1]
        w_pos = cwp[-1]
        if n < 2:
            continue
        cut = np.nonzero(sv[:-1] != sv[1:])[0]
        if cut.size == 0:
            continue
        wl = cw[cut]
        wlp = cwp[cut]
        wr = w_tot - wl
        wrp = w_pos - wlp
        pl = wlp / wl
        ql = (wl - wlp) / wl
        pr = wrp / wr
        qr = (wr - wrp) / wr
        score = wl * (1.0 - pl * pl - ql * ql) + wr * (1.0 - pr * pr - qr * qr)
        j = int(np.argmin(score))  # first minimum: lowest threshold wins ties
        if score[j] < best_score:
            best_score = float(score[j])
            best_feat = int(f)
            best_thr = 0.5 * (sv[cut[j]] + sv[cut[j] + 1])
    return best_feat, best_thr, best_score


def _tree_scores_numpy(feature, threshold, left, right, leaf_pos, X):
    n = X.shape[0]
    node = np.zeros(n, dtype=np.int64)
    active = feature[node] >= 0
    while np.any(active):
        ai = np.nonzero(active)[0]
        f = feature[node[ai]]
        go_left = X[ai, f] <= threshold[node[ai]]
        node[ai] = np.where(go_left, left[node[ai]], right[node[ai]])
        active[ai] = feature[node[ai]] >= 0
    return leaf_pos[node]


# --- numba backend ---------------------------------------------------------

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def _best_split_numba(X, y, w, idx, feats):
        n = idx.shape[0]
        best_score = np.inf
        best_feat = -1
        best_thr = 0.0
        vals = np.empty(n, dtype=np.float64)
        for fi in range(feats.shape[0]):
            f = feats[fi]
            for i in range(n):
                vals[i] = X[idx[i], f]
            order = np.argsort(vals, kind="mergesort")
            w_tot = 0.0
            w_pos = 0.0
            for i in range(n):
                k = idx[order[i]]
                w_tot += w[k]
                w_pos += w[k] * y[k]
            wl = 0.0
            wlp = 0.0
            for j in range(n - 1):
                k = idx[order[j]]
                wl += w[k]
                wlp += w[k] * y[k]
                v0 = vals[order[j]]
                v1 = vals[order[j + 1]]
                if v0 == v1:
                    continue
                wr = w_tot - wl
                wrp = w_pos - wlp
                pl = wlp / wl
                ql = (wl - wlp) / wl
                pr = wrp / wr
                qr = (wr - wrp) / wr
                score = wl * (1.0 - pl * pl - ql * ql) + wr * (1.0 - pr * pr - qr * qr)
                if score < best_score:
                    best_score = score
                    best_feat = f
                    best_thr = 0.5 * (v0 + v1)
        return best_feat, best_thr, best_score

    @njit(cache=True)
    def _tree_scores_numba(feature, threshold, left, right, leaf_pos, X):
        n = X.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] = leaf_pos[node]
        return out

    return _best_split_numba, _tree_scores_numba


def _select_backend():
    choice = os.environ.get("MODMAP_BACKEND", "numba").lower()
    if choice == "numpy":
        return "numpy", _best_split_numpy, _tree_scores_numpy
    if choice != "numba":
        raise ValueError(f"MODMAP_BACKEND must be 'numba' or 'numpy', got {choice!r}")
    try:
        split, scores = _build_numba()
    except ImportError:
        return "numpy", _best_split_numpy, _tree_scores_numpy
    return "numba", split, scores


BACKEND, _best_split_impl, _tree_scores_impl = _select_backend()


def best_split(X, y, w, idx, feats):
    """Best (feature, midpoint threshold) over candidate features at one node.

    Returns (feature, threshold, weighted_child_gini); feature is -1 when no
    valid split exists. The caller accepts the split only if the returned
    impurity strictly undercuts the node's own weighted Gini.
    """
    return _best_split_impl(X, y, w, idx, feats)


def tree_scores(feature, threshold, left, right, leaf_pos, X):
    """Positive-class leaf posterior reached by each row of X."""
    return _tree_scores_impl(feature, threshold, left, right, leaf_pos, X)


def node_gini(w_pos: float, w_tot: float) -> float:
    """Weighted-frequency Gini impurity of a node (not weight-scaled)."""
    if w_tot <= 0:
        raise ValueError("node has no weight")
    return _gini_pair(w_pos, w_tot)
