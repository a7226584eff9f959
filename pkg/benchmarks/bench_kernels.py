"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from ctrattn import kernels
from ctrattn.rl.buffer import SumTree
from ctrattn.tioa import GazeGeometry, build_target

BACKENDS = {"cython": kernels.load_backend("cython"), "python": kernels.load_backend("python")}


def sumtree_workload(backend, capacity=100_000, ops=20_000, seed=0):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, capacity, ops)
    vals = rng.random(ops)
    probes = rng.random(ops)
    tree = SumTree(capacity, backend=backend)
    tree.update(np.arange(capacity), rng.random(capacity))

    def run():
        # single-transition updates and batch-32 lookups, as during DQN training
        for k in range(0, ops, 32):
            for j in range(k, min(k + 4, ops)):
                tree.update(idx[j], vals[j])
            tree.find(probes[k : k + 32] * tree.total)

    return run


def gaze_workload(backend, n=200, seed=0):
    rng = np.random.default_rng(seed)
    geom = GazeGeometry(source_size=(160, 210), px_per_degree=(7.0, 5.5))
    trails = []
    for _ in range(n):
        m = int(rng.integers(10, 61))
        xy = rng.random((m, 2)) * (160, 210)
        trails.append(np.column_stack([xy, np.cumsum(rng.uniform(0.01, 0.05, m))]))

    def run():
        for tr in trails:
            build_target(tr, geom, backend=backend)

    return run


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    results = {}
    if BACKENDS["cython"] is BACKENDS["python"]:
        print("compiled kernels unavailable; only the fallback is timed")
    for name, make in (("sumtree", sumtree_workload), ("gaze_target", gaze_workload)):
        for bname, mod in BACKENDS.items():
            t = min(timeit.repeat(make(mod), number=1, repeat=args.repeat))
            results[f"{name}/{bname}"] = t
        speedup = results[f"{name}/python"] / results[f"{name}/cython"]
        print(f"{name:12s} cython {results[f'{name}/cython']*1e3:9.2f} ms   "
              f"python {results[f'{name}/python']*1e3:9.2f} ms   speedup {speedup:5.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return results


if __name__ == "__main__":
    main()
