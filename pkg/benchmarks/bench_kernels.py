#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times the three hot kernels on representative workloads and prints the
per-kernel speedup. The compiled module must be built (pip install -e .)
for the comparison column to appear.
"""

import argparse
import time

import numpy as np

from bpminer import _kernels_py

try:
    from bpminer import _kernels
except ImportError:
    _kernels = None


def _best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def workloads():
    rng = np.random.default_rng(0)

    n_pts, k = 20_000, 4
    points = np.ascontiguousarray(rng.normal([120, 80], 15, size=(n_pts, 2)))
    means = np.ascontiguousarray(rng.normal([120, 80], 10, size=(k, 2)))
    covs = np.empty((k, 2, 2))
    for j in range(k):
        a = rng.normal(size=(2, 2))
        covs[j] = a @ a.T + 5 * np.eye(2)

    values = np.ascontiguousarray(rng.uniform(0, 200, size=60))
    miss_target = -50.0  # forces the full size-2..4 enumeration

    x = np.linspace(-3, 3, 256)
    xx, yy = np.meshgrid(x, x)
    grid = np.ascontiguousarray(np.exp(-(xx**2 + yy**2)))

    return [
        (f"component_logpdf ({n_pts} pts x {k} comps)",
         lambda impl: impl.component_logpdf(points, means, covs)),
        ("subset_mean_hit (n=60, worst-case miss)",
         lambda impl: impl.subset_mean_hit(values, miss_target, 0.05, 4)),
        ("march_cells (256x256, level 0.5)",
         lambda impl: impl.march_cells(grid, 0.5)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=5,
                        help="timing repetitions per kernel (best-of)")
    args = parser.parse_args()

    header = f"{'kernel':44} {'python':>12} {'cython':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, call in workloads():
        t_py = _best_of(lambda: call(_kernels_py), args.repeat)
        if _kernels is not None:
            t_cy = _best_of(lambda: call(_kernels), args.repeat)
            print(f"{name:44} {t_py * 1e3:>10.2f}ms {t_cy * 1e3:>10.2f}ms "
                  f"{t_py / t_cy:>8.1f}x")
        else:
            print(f"{name:44} {t_py * 1e3:>10.2f}ms {'(not built)':>12} {'-':>9}")


if __name__ == "__main__":
    main()
