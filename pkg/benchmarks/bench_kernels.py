"""Benchmark the compiled geometry kernels against the numpy fallback.

Both backends implement identical semantics (including tie-breaking); this
script reports wall-clock speedups for the three quadratic kernels on a
range of cloud sizes. Run from the repo root:

    python3 benchmarks/bench_kernels.py
"""

from __future__ import annotations

import time

import numpy as np

from cloudadapt.kernels import _numpy as np_backend

try:
    from cloudadapt.kernels import _fastcore as fast_backend
except ImportError:
    fast_backend = None


def _time(fn, *args, repeats: int = 5) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench(sizes=(64, 256, 1024), k: int = 8, seed: int = 0) -> None:
    if fast_backend is None:
        print("compiled extension not available; nothing to compare")
        return
    rng = np.random.default_rng(seed)
    header = f"{'kernel':<16}{'m':>6}{'numpy (ms)':>14}{'compiled (ms)':>16}{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for m in sizes:
        cloud = rng.normal(size=(m, 3))
        cases = [
            ("knn_indices", lambda b: b.knn_indices(cloud, k)),
            ("fps_indices", lambda b: b.fps_indices(cloud, m // 2, 0)),
            ("pairwise_sqdist", lambda b: b.pairwise_sqdist(cloud, cloud)),
        ]
        for name, call in cases:
            ref = call(np_backend)
            out = call(fast_backend)
            assert np.array_equal(np.asarray(ref), np.asarray(out)), (
                f"{name} m={m}: backend outputs differ")
            t_np = _time(call, np_backend)
            t_fast = _time(call, fast_backend)
            print(f"{name:<16}{m:>6}{t_np * 1e3:>14.3f}{t_fast * 1e3:>16.3f}"
                  f"{t_np / t_fast:>10.2f}x")


if __name__ == "__main__":
    bench()
