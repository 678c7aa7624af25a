#!/usr/bin/env python3
"""Benchmark the compiled bank-scoring kernels against the numpy backend.

Times the three kernels on the same random inputs under both backends,
reports the median of --repeats runs after a warmup pass, and checks that
the two backends agree to float precision. Example:

    python3 benchmarks/bench_kernels.py --n 2000 --m 20000 --d 128
"""

import argparse
import statistics
import time

import numpy as np

from refd import kernels


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000, help="query rows")
    ap.add_argument("--m", type=int, default=20000, help="bank rows")
    ap.add_argument("--d", type=int, default=128, help="feature dimension")
    ap.add_argument("--k", type=int, default=10, help="neighbor count")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    return ap.parse_args()


def timed(fn, repeats):
    fn()  # warmup: page in inputs, JIT nothing (there is nothing to JIT)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples), out


def main():
    args = parse_args()
    rng = np.random.default_rng(args.seed)
    q = rng.standard_normal((args.n, args.d))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    b = rng.standard_normal((args.m, args.d))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    w = rng.uniform(0.5, 4.0, size=args.m)

    cases = [
        ("mean_weighted_similarity",
         lambda: kernels.mean_weighted_similarity(q, b, w)),
        ("kth_neighbor_distance",
         lambda: kernels.kth_neighbor_distance(q, b, args.k)),
        ("topk_weighted_similarity_mean",
         lambda: kernels.topk_weighted_similarity_mean(q, b, w, args.k)),
    ]

    backends = ["numpy"]
    if kernels.HAVE_COMPILED:
        backends.append("compiled")
    else:
        print("compiled extension not built; timing numpy only")

    print(f"n={args.n} m={args.m} d={args.d} k={args.k} "
          f"(median of {args.repeats})")
    header = f"{'kernel':34s}" + "".join(f"{b:>12s}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}{'max diff':>12s}"
    print(header)

    for name, fn in cases:
        times, outs = {}, {}
        for backend in backends:
            kernels.use_backend(backend)
            times[backend], outs[backend] = timed(fn, args.repeats)
        row = f"{name:34s}" + "".join(
            f"{times[b] * 1e3:10.1f}ms" for b in backends
        )
        if len(backends) == 2:
            diff = float(np.max(np.abs(outs["numpy"] - outs["compiled"])))
            row += f"{times['numpy'] / times['compiled']:9.2f}x{diff:12.2e}"
        print(row)

    kernels.use_backend("auto")


if __name__ == "__main__":
    main()
