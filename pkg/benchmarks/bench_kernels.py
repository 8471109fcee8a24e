"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are imported directly, so the environment switch is irrelevant here.
"""

import argparse
import timeit

import numpy as np

from peak2struct import _fallback

try:
    from peak2struct import _kernels
except ImportError:
    _kernels = None


def neighbor_case(n, seed=0):
    rng = np.random.default_rng(seed)
    L = np.diag([12.0, 13.5, 15.0]) + np.triu(rng.uniform(-1, 1, (3, 3)), 1)
    heights = 1.0 / np.linalg.norm(np.linalg.inv(L), axis=0)
    frac = rng.random((n, 3))
    return (frac, frac, L, heights, 5.0, 1e-8)


def sf_case(n_ref, n_atoms, seed=0):
    rng = np.random.default_rng(seed)
    hkl = rng.integers(-15, 16, (n_ref, 3)).astype(float)
    return (hkl, rng.uniform(0, 0.4, n_ref), rng.random((n_atoms, 3)), rng.integers(0, 4, n_atoms).astype(np.int64),
            np.ones(n_atoms), np.full(n_atoms, 0.03), rng.uniform(1, 17, (4, n_ref)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    cases = [
        ("lattice_neighbors n=100", "lattice_neighbors", neighbor_case(100)),
        ("lattice_neighbors n=400", "lattice_neighbors", neighbor_case(400)),
        ("structure_factor_sum 5000x100", "structure_factor_sum", sf_case(5000, 100)),
        ("structure_factor_sum 20000x400", "structure_factor_sum", sf_case(20000, 400)),
    ]
    print(f"{'case':34s} {'numpy (s)':>10s} {'cython (s)':>11s} {'speed-up':>9s}")
    for name, fn, case in cases:
        py = min(timeit.repeat(lambda: getattr(_fallback, fn)(*case), number=1, repeat=args.repeat))
        if _kernels is None:
            print(f"{name:34s} {py:10.4f} {'n/a':>11s} {'':>9s}")
            continue
        cy = min(timeit.repeat(lambda: getattr(_kernels, fn)(*case), number=1, repeat=args.repeat))
        print(f"{name:34s} {py:10.4f} {cy:11.4f} {py / cy:8.1f}x")


if __name__ == "__main__":
    main()
