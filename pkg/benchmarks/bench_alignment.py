"""Timing comparison for the global-alignment kernel: compiled vs pure Python.

Usage:
    python benchmarks/bench_alignment.py [--lengths 64,128,256] [--pairs 20] [--repeats 3]

Both backends must produce identical scores and tracebacks; the benchmark
asserts that while it times them.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from spanforge._kernels import _nw_py

try:
    from spanforge._kernels import _nw_cy
except ImportError:
    _nw_cy = None

N_RESIDUES = 25


def _random_pairs(length: int, n_pairs: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    return [
        (
            rng.integers(0, N_RESIDUES, size=length).astype(np.int32),
            rng.integers(0, N_RESIDUES, size=length).astype(np.int32),
        )
        for _ in range(n_pairs)
    ]


def _time(fn, pairs, substitution, gap, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for a, b in pairs:
            fn(a, b, substitution, gap)
        best = min(best, time.perf_counter() - start)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--lengths", default="64,128,256")
    parser.add_argument("--pairs", type=int, default=20)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    lengths = [int(x) for x in args.lengths.split(",")]

    substitution = np.full((N_RESIDUES, N_RESIDUES), -0.2, dtype=np.float64)
    np.fill_diagonal(substitution, 1.0)
    gap = -0.5

    if _nw_cy is None:
        print("compiled backend unavailable; timing pure Python only")

    header = f"{'length':>8} {'pairs':>6} {'pure (s)':>10}"
    if _nw_cy is not None:
        header += f" {'cython (s)':>11} {'speedup':>8}"
    print(header)
    for length in lengths:
        pairs = _random_pairs(length, args.pairs, seed=length)
        if _nw_cy is not None:
            for a, b in pairs:
                expect = _nw_py.align_global(a, b, substitution, gap)
                got = _nw_cy.align_global(a, b, substitution, gap)
                assert expect[0] == got[0]
                assert np.array_equal(expect[1], got[1]) and np.array_equal(expect[2], got[2])
        t_py = _time(_nw_py.align_global, pairs, substitution, gap, args.repeats)
        line = f"{length:>8} {args.pairs:>6} {t_py:>10.4f}"
        if _nw_cy is not None:
            t_cy = _time(_nw_cy.align_global, pairs, substitution, gap, args.repeats)
            line += f" {t_cy:>11.4f} {t_py / t_cy:>8.1f}x"
        print(line)


if __name__ == "__main__":
    main()
