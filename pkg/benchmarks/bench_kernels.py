"""Compiled vs pure-Python timing of the solver's hot kernels.

    python benchmarks/bench_kernels.py --steps 20000 --repeat 3

Each mode runs in its own interpreter (``DISDCA_DISABLE_JIT=0`` or ``1``),
so the fallback really is Python all the way down.  JIT warm-up is
excluded from the timings.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _measure(args):
    from disdca import binarize_labels, generate_synthetic
    from disdca import kernels
    from disdca.model import LOSS_CODES

    ds = binarize_labels(generate_synthetic(args.groups, 5, args.points, seed=args.seed))
    indptr, indices, data = ds.csr()
    xnorm2 = np.ascontiguousarray(ds.row_norms_sq)
    shard = np.arange(ds.n, dtype=np.int64)
    picks = np.random.default_rng(args.seed).integers(0, ds.n, size=args.steps)
    w = np.random.default_rng(1).standard_normal(ds.dim) * 0.1
    out = {"n": ds.n, "d": ds.dim}
    for kind, code in sorted(LOSS_CODES.items()):
        y = ds.y if kind != "least_squares" else ds.y * 0.5

        def inner():
            alpha = np.zeros(ds.n)
            u = np.zeros(ds.dim)
            kernels.worker_round(code, indptr, indices, data, xnorm2, y, alpha, shard, picks, u, u, 1.0,
                                 1.0 / (args.lam * ds.n), args.lam, float(ds.n), False, True)

        def objective():
            kernels.loss_sum(code, indptr, indices, data, y, w, shard)

        for name, fn in (("worker_round", inner), ("loss_sum", objective)):
            fn()  # compile when jitted
            best = np.inf
            for _ in range(args.repeat):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            out[f"{name}/{kind}"] = best
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--groups", type=int, default=20)
    ap.add_argument("--points", type=int, default=500)
    ap.add_argument("--steps", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--lam", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        print(json.dumps(_measure(args)))
        return

    timings = {}
    for mode, flag in (("jit", "0"), ("python", "1")):
        env = dict(os.environ, DISDCA_DISABLE_JIT=flag)
        proc = subprocess.run([sys.executable, __file__, "--child", *sys.argv[1:]], env=env, check=True,
                              capture_output=True, text=True)
        timings[mode] = json.loads(proc.stdout)
    jit, py = timings["jit"], timings["python"]
    print(f"n={jit['n']} d={jit['d']} inner steps={args.steps}")
    print(f"{'kernel':<16}{'loss':<16}{'jit [s]':>10}{'python [s]':>12}{'speed-up':>10}")
    for key in sorted(k for k in jit if "/" in k):
        name, kind = key.split("/")
        print(f"{name:<16}{kind:<16}{jit[key]:>10.4f}{py[key]:>12.4f}{py[key] / jit[key]:>9.0f}x")


if __name__ == "__main__":
    main()
