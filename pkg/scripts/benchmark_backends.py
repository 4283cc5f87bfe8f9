#!/usr/bin/env python3
"""Benchmark the numba and pure-numpy forest kernel backends.

Each backend runs in a subprocess with MODMAP_BACKEND set, since the backend
is chosen at import time. Reports fit and predict wall time on a synthetic
workload and checks that both backends produce identical predictions.
"""
import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, os, sys, time
import numpy as np
from modmap.featurize import FeatureLayout
from modmap.forest import BACKEND, ForestHyperparams, fit_forest, predict

n, d, n_trees, max_depth, seed = json.loads(sys.argv[1])
rng = np.random.default_rng(seed)
X = rng.random((n, d))
y = (X[:, 0] + 0.2 * rng.standard_normal(n)) > 0.5
layout = FeatureLayout("full", 1, d // 2)
hyper = ForestHyperparams(n_trees=n_trees, max_depth=max_depth)

# warm-up (jit compilation for the numba backend)
fit_forest(X[:64], y[:64], ForestHyperparams(n_trees=2, max_depth=3), 0, layout)

t0 = time.perf_counter()
model = fit_forest(X, y, hyper, seed, layout)
t_fit = time.perf_counter() - t0
t0 = time.perf_counter()
labels, scores = predict(model, X)
t_pred = time.perf_counter() - t0
print(json.dumps({"backend": BACKEND, "fit_s": t_fit, "predict_s": t_pred,
                  "score_digest": float(np.sum(scores))}))
"""


def run_backend(backend, params):
    env = dict(os.environ, MODMAP_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", WORKER, json.dumps(params)],
                         env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=2000, help="training rows")
    parser.add_argument("--d", type=int, default=40, help="feature width")
    parser.add_argument("--n-trees", type=int, default=100)
    parser.add_argument("--max-depth", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    params = [args.n, args.d, args.n_trees, args.max_depth, args.seed]

    results = {b: run_backend(b, params) for b in ("numba", "numpy")}
    print(f"workload: n={args.n} d={args.d} trees={args.n_trees} "
          f"depth={args.max_depth}")
    for backend, r in results.items():
        assert r["backend"] == backend, f"{backend} backend did not load"
        print(f"  {backend:>5}: fit {r['fit_s']:.3f}s  predict {r['predict_s']:.3f}s")
    if results["numba"]["score_digest"] != results["numpy"]["score_digest"]:
        print("  WARNING: backends disagree on predictions")
        return 1
    speedup = results["numpy"]["fit_s"] / results["numba"]["fit_s"]
    print(f"  numba fit speedup: {speedup:.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
