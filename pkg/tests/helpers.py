"""Shared test utilities: in-memory synth pipeline runs and brute-force oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from modmap import analysis, annotation, featurize, forest, synth
from modmap.core_model import DatasetManifest, Instance, ModalityId


def make_manifest(M=2, L=3, n=4, tags=None):
    modalities = [ModalityId(i, f"m{i}") for i in range(M)]
    instances = [Instance(id=f"i{k}", question=f"q{k}",
                          options=tuple(f"o{j}" for j in range(L)),
                          gold_index=k % L,
                          tags=tuple((tags or {}).get(f"i{k}", ())))
                 for k in range(n)]
    return DatasetManifest(modalities=modalities, label_space_size=L,
                           instances=instances,
                           splits={"val": [i.id for i in instances]})


def store_from_rows(rows, manifest, tmp_path, name="probs.jsonl"):
    path = tmp_path / name
    synth.write_probability_rows(rows, path)
    return featurize.ingest_probabilities(path, manifest)


@dataclass
class PipelineRun:
    spec: synth.SynthSpec
    manifest: object
    truth: object
    seed_sample: object
    store: object
    labels: list
    models: dict
    layout: object
    mmap: object = None
    recovery: object = None
    summaries: dict = field(default_factory=dict)


def run_synth_pipeline(spec, tmp_path, grid=None, variant="full",
                       annotate_ids=None, holdout_only=False) -> PipelineRun:
    """Generate -> aggregate -> featurize -> train -> silver annotate -> score."""
    manifest, truth, seed_sample = synth.build_dataset(spec)
    rows = synth.probability_rows(spec, manifest, truth)
    store = store_from_rows(rows, manifest, tmp_path)
    records = synth.annotation_records(spec, manifest, truth, seed_sample)
    result = annotation.filter_records(records, annotation.QualityPolicy(), manifest)
    labels = annotation.aggregate_seed(result.kept, manifest, seed_sample,
                                       quorum=spec.quorum)
    layout = featurize.FeatureLayout(variant, spec.n_modalities, spec.label_space_size)
    label_by = {(l.instance_id, l.modality.index): l.solvable for l in labels}

    def part_xy(part, modality):
        ids = seed_sample.ids_in(part)
        X = featurize.build_feature_matrix(manifest, store, ids, layout)
        y = np.array([label_by[(i, modality.index)] for i in ids])
        return X, y, ids

    grid = grid or [forest.ForestHyperparams(n_trees=100, max_depth=8)]
    models = {}
    summaries = {}
    for modality in manifest.modalities:
        X_tr, y_tr, tr_ids = part_xy("train", modality)
        X_va, y_va, va_ids = part_xy("val", modality)
        model, board = forest.grid_search(X_tr, y_tr, tr_ids, X_va, y_va, va_ids,
                                          grid, spec.seed, layout,
                                          modality_name=modality.name)
        models[modality.name] = model
        summaries[modality.name] = forest.evaluate(model, X_va, y_va)

    if annotate_ids is None:
        if holdout_only:
            seed_set = set(seed_sample.instance_ids)
            annotate_ids = [i.id for i in manifest.instances if i.id not in seed_set]
        else:
            annotate_ids = [i.id for i in manifest.instances]
    mmap = recovery = None
    if annotate_ids:
        mmap = analysis.silver_annotate(models, manifest, store, annotate_ids)
        recovery = synth.score_recovery(mmap, truth, manifest)
    return PipelineRun(spec=spec, manifest=manifest, truth=truth,
                       seed_sample=seed_sample, store=store, labels=labels,
                       models=models, layout=layout, mmap=mmap,
                       recovery=recovery, summaries=summaries)


# --- brute-force oracles ---------------------------------------------------

def oracle_gini(w_pos, w_tot):
    p = w_pos / w_tot
    return 1.0 - p * p - (1.0 - p) * (1.0 - p)


def oracle_best_split(X, y, w):
    """Exhaustive search over every (feature, midpoint) pair.

    Mirrors the production tie-break: lowest weighted child Gini, then lowest
    feature index, then lowest threshold (by strict-improvement scanning).
    """
    n, d = X.shape
    best = (math.inf, None, None)
    for f in range(d):
        vals = np.unique(X[:, f])
        for a, b in zip(vals[:-1], vals[1:]):
            thr = 0.5 * (a + b)
            left = X[:, f] <= thr
            wl = float(w[left].sum())
            wr = float(w[~left].sum())
            wlp = float(w[left & y].sum()) if np.any(left & y) else 0.0
            wrp = float(w[~left & y].sum()) if np.any(~left & y) else 0.0
            score = wl * oracle_gini(wlp, wl) + wr * oracle_gini(wrp, wr)
            if score < best[0]:
                best = (score, f, thr)
    return best


def oracle_fit_tree(X, y, w, max_depth, depth=0):
    """Recursive exhaustive-search CART with the production stopping rules.

    Returns nested dicts: {"leaf": posterior} or
    {"feature", "threshold", "left", "right"}.
    """
    w_tot = float(w.sum())
    w_pos = float(w[y].sum())
    leaf = {"leaf": w_pos / w_tot}
    if depth >= max_depth or w_pos <= 0 or w_pos >= w_tot or len(y) < 2:
        return leaf
    score, f, thr = oracle_best_split(X, y, w)
    parent = w_tot * oracle_gini(w_pos, w_tot)
    if f is None or not score < parent:
        return leaf
    left = X[:, f] <= thr
    return {"feature": f, "threshold": thr,
            "left": oracle_fit_tree(X[left], y[left], w[left], max_depth, depth + 1),
            "right": oracle_fit_tree(X[~left], y[~left], w[~left], max_depth, depth + 1)}


def oracle_tree_predict(node, x):
    while "leaf" not in node:
        node = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
    return node["leaf"]


def tree_to_nested(tree, node=0):
    if tree.feature[node] < 0:
        return {"leaf": tree.w_pos[node] / (tree.w_pos[node] + tree.w_neg[node])}
    return {"feature": int(tree.feature[node]),
            "threshold": float(tree.threshold[node]),
            "left": tree_to_nested(tree, tree.left[node]),
            "right": tree_to_nested(tree, tree.right[node])}


def trees_equal(a, b, tol=0.0):
    if ("leaf" in a) != ("leaf" in b):
        return False
    if "leaf" in a:
        return abs(a["leaf"] - b["leaf"]) <= tol
    if a["feature"] != b["feature"] or a["threshold"] != b["threshold"]:
        return False
    return (trees_equal(a["left"], b["left"], tol) and
            trees_equal(a["right"], b["right"], tol))
