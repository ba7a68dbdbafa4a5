#!/usr/bin/env python3
"""Time every hot kernel with numba on and off.

Each path runs in its own interpreter, because the numba switch is read once at
import. The parent collects both sets of timings and prints a table.

    python3 benchmarks/bench_kernels.py            # both paths
    python3 benchmarks/bench_kernels.py --repeat 5 --json out.json
"""
import argparse
import json
import os
import subprocess
import sys
import tempfile
import time

import numpy as np


def _csr(n, p, rng):
    upper = np.triu(rng.random((n, n)) < p, 1)
    adj = upper | upper.T
    indptr = np.concatenate([[0], np.cumsum(adj.sum(axis=1))]).astype(np.int64)
    indices = np.nonzero(adj)[1].astype(np.int64)
    weights = rng.uniform(0.1, 3.0, len(indices))
    # symmetric weights
    w = np.zeros((n, n))
    w[adj] = weights
    w = np.triu(w, 1) + np.triu(w, 1).T
    return indptr, indices, w[adj]


def workloads():
    from svcevo import kernels
    from svcevo.explain import tree_shap
    from svcevo.forest import Hyperparameters, train

    rng = np.random.default_rng(0)
    out = {}

    n_pairs, n_events = 2000, 200_000
    pair = np.sort(rng.integers(0, n_pairs, n_events)).astype(np.int64)
    order = np.lexsort((rng.random(n_events), pair))
    pair = pair[order]
    mech = rng.integers(0, 3, n_events).astype(np.int64)
    impact = rng.uniform(-0.5, 2.0, n_events)
    t = np.sort(rng.uniform(0, 400 * kernels.SECONDS_PER_DAY, n_events))
    cutoff = 300 * kernels.SECONDS_PER_DAY
    out["accumulate_weights"] = lambda: kernels.accumulate_weights(pair, mech, impact, t, cutoff, n_pairs,
                                                                   30.0, 365.0)

    indptr, indices, w = _csr(600, 0.02, rng)
    degree = np.array([w[indptr[i]:indptr[i + 1]].sum() for i in range(600)])
    visit = rng.permutation(600).astype(np.int64)
    two_m = float(w.sum())

    def louvain_pass():
        comm = np.arange(600, dtype=np.int64)
        kernels.local_move(indptr, indices, w, degree, comm, visit, two_m, 1.0, 1e-12 * two_m)

    out["local_move"] = louvain_pass

    gi, gx, _ = _csr(400, 0.05, rng)
    out["closeness"] = lambda: kernels.closeness(gi, gx)
    out["clustering"] = lambda: kernels.clustering(gi, gx)

    X = rng.normal(size=(800, 45))
    y = rng.integers(0, 6, 800)
    sw = np.ones(800)
    idx = rng.integers(0, 800, 800).astype(np.int64)
    feats = np.arange(45, dtype=np.int64)
    total = np.bincount(y[idx], minlength=6).astype(float)
    out["best_split"] = lambda: kernels.best_split(X, y, sw, idx, feats, total, 6, 2, 7)

    labels = np.array([f"c{k}" for k in y])
    forest = train(X[:300], labels[:300], Hyperparameters(n_trees=5, seed=0))
    rows = X[:40]

    def shap_batch():
        for tree in forest.trees:
            for x in rows:
                tree_shap(tree, x, 45)

    out["tree_shap"] = shap_batch
    return out


def worker(repeat: int, pipeline: bool) -> dict:
    from svcevo import _accel

    res = {"numba": _accel.NUMBA_ENABLED, "timings": {}}
    for name, fn in workloads().items():
        t0 = time.perf_counter()
        fn()  # first call includes compilation when numba is on
        first = time.perf_counter() - t0
        best = np.inf
        for _ in range(repeat):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        res["timings"][name] = {"first": first, "best": best}
    if pipeline:
        from svcevo.cli import main

        with tempfile.TemporaryDirectory() as d:
            t0 = time.perf_counter()
            main(["pipeline", "--synth", "--run-dir", d])
            res["timings"]["pipeline"] = {"first": time.perf_counter() - t0, "best": float("nan")}
    return res


def run_path(disable: bool, repeat: int, pipeline: bool) -> dict:
    env = dict(os.environ)
    env["SVCEVO_DISABLE_NUMBA"] = "1" if disable else "0"
    cmd = [sys.executable, __file__, "--worker", "--repeat", str(repeat)]
    if pipeline:
        cmd.append("--pipeline")
    res = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(res.stdout.strip().splitlines()[-1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--no-pipeline", action="store_true", help="skip the end-to-end pipeline timing")
    ap.add_argument("--json", help="also write the raw timings here")
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    ap.add_argument("--pipeline", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)

    if args.worker:
        print(json.dumps(worker(args.repeat, args.pipeline)))
        return 0

    jit = run_path(False, args.repeat, not args.no_pipeline)
    ref = run_path(True, args.repeat, not args.no_pipeline)
    if not jit["numba"]:
        print("numba is not importable; both columns use the fallback", file=sys.stderr)

    print(f"{'kernel':<20}{'numba first':>13}{'numba best':>13}{'fallback best':>15}{'speedup':>10}")
    for name, a in jit["timings"].items():
        b = ref["timings"][name]
        if name == "pipeline":
            print(f"{name:<20}{a['first']:>12.3f}s{'':>13}{b['first']:>14.3f}s{b['first'] / a['first']:>9.1f}x")
            continue
        print(f"{name:<20}{a['first']:>12.4f}s{a['best']:>12.4f}s{b['best']:>14.4f}s{b['best'] / a['best']:>9.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"numba": jit, "fallback": ref}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
