"""Time the numba kernels against their pure-numpy twins.

Runs the dual-potential iteration and the Lloyd iteration on a few problem
sizes and prints per-call medians for each backend. The jit variants are
warmed once before timing so compilation is excluded.

Usage: python3 benchmarks/bench_kernels.py [--repeats 7]
"""

import argparse
import time

import numpy as np

from otclust.kernels import (
    HAVE_NUMBA,
    lloyd_numba,
    lloyd_numpy,
    sinkhorn_potentials_numba,
    sinkhorn_potentials_numpy,
)


def median_seconds(fn, args, repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        started = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - started)
    return float(np.median(samples))


def sinkhorn_case(rng, n: int, k: int):
    cost = rng.uniform(0.0, 3.0, (n, k))
    mu = rng.uniform(0.1, 1.1, n)
    nu = rng.uniform(0.1, 1.1, k)
    log_kernel = -cost / 0.05
    return log_kernel, mu / mu.sum(), nu / nu.sum(), 2000, 1e-8


def lloyd_case(rng, n: int, k: int, dim: int):
    points = rng.standard_normal((n, dim))
    centroids = points[rng.choice(n, k, replace=False)].copy()
    return points, centroids, 300


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7,
                        help="timed calls per case; the median is reported (default: 7)")
    args = parser.parse_args()

    if not HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1

    rng = np.random.default_rng(0)
    rows = []

    for n, k in [(200, 10), (1000, 10), (5000, 20)]:
        case = sinkhorn_case(rng, n, k)
        sinkhorn_potentials_numba(*case)
        fast = median_seconds(sinkhorn_potentials_numba, case, args.repeats)
        slow = median_seconds(sinkhorn_potentials_numpy, case, args.repeats)
        rows.append((f"sinkhorn {n}x{k}", slow, fast))

    for n, k, dim in [(500, 10, 16), (2000, 10, 16), (5000, 20, 32)]:
        case = lloyd_case(rng, n, k, dim)
        lloyd_numba(*case)
        fast = median_seconds(lloyd_numba, case, args.repeats)
        slow = median_seconds(lloyd_numpy, case, args.repeats)
        rows.append((f"lloyd {n}x{dim} k={k}", slow, fast))

    width = max(len(name) for name, _, _ in rows)
    print(f"{'case':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for name, slow, fast in rows:
        print(f"{name:<{width}}  {slow:>9.4f}s  {fast:>9.4f}s  {slow / fast:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
