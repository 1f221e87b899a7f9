"""Benchmark the redundancy kernel: materialized LxL path vs streamed path.

Usage: python benchmarks/bench_redundancy.py [--heads N] [--dim D]

Prints wall time and peak transient allocation for both paths over a range
of token counts, plus the max elementwise difference between them.
"""

from __future__ import annotations

import argparse
import time
import tracemalloc

import numpy as np

from flowcache_sim import redundancy_fast, redundancy_naive


def measure(fn, keys):
    t0 = time.perf_counter()
    out = fn(keys)
    wall = time.perf_counter() - t0

    tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    fn(keys)
    peak = tracemalloc.get_traced_memory()[1] - base
    tracemalloc.stop()
    return out, wall, peak


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--heads", type=int, default=1)
    parser.add_argument("--dim", type=int, default=128)
    parser.add_argument("--sizes", default="512,1024,2048,4096,8192")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    sizes = [int(s) for s in args.sizes.split(",")]
    print(f"heads={args.heads} dim={args.dim}")
    print(f"{'tokens':>8} {'naive ms':>10} {'fast ms':>10} {'speedup':>8} "
          f"{'naive MB':>10} {'fast MB':>9} {'max diff':>10}")
    for n in sizes:
        keys = rng.normal(size=(n, args.heads, args.dim))
        naive_out, naive_s, naive_mem = measure(redundancy_naive, keys)
        fast_out, fast_s, fast_mem = measure(redundancy_fast, keys)
        diff = float(np.abs(naive_out - fast_out).max())
        print(f"{n:>8} {naive_s * 1e3:>10.2f} {fast_s * 1e3:>10.2f} "
              f"{naive_s / fast_s:>7.1f}x {naive_mem / 1e6:>10.2f} "
              f"{fast_mem / 1e6:>9.2f} {diff:>10.2e}")


if __name__ == "__main__":
    main()
