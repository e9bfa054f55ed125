#!/usr/bin/env python3
"""Time the numba kernels against their pure-numpy reference paths.

Covers the sequential scan recurrence (forward and backward) and
point-cloud rasterization at training-scale shapes. Run from the repo
root after installing the package:

    python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from rangegen import backend


def timeit(fn, *args, repeat=5):
    fn(*args)  # warm up (includes JIT compilation for numba paths)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_scan():
    rng = np.random.default_rng(0)
    # One horizontal-direction scan over a 16-sample batch at 64x1024,
    # 32 channels: the shape the deepest stage sees during training.
    B, L, C = 16, 64 * 64, 32
    abar = rng.uniform(0.5, 1.0, (B, L, C)).astype(np.float32)
    q = rng.standard_normal((B, L, C)).astype(np.float32)
    rows = []
    t_np = timeit(backend.scan_forward_numpy, abar, q)
    rows.append(("scan_forward", "numpy", t_np, 1.0))
    if backend.HAVE_NUMBA:
        t_nb = timeit(backend.scan_forward_numba, abar, q)
        rows.append(("scan_forward", "numba", t_nb, t_np / t_nb))
    h = backend.scan_forward_numpy(abar, q)
    gh = rng.standard_normal(h.shape).astype(np.float32)
    t_np = timeit(backend.scan_backward_numpy, abar, h, gh)
    rows.append(("scan_backward", "numpy", t_np, 1.0))
    if backend.HAVE_NUMBA:
        t_nb = timeit(backend.scan_backward_numba, abar, h, gh)
        rows.append(("scan_backward", "numba", t_nb, t_np / t_nb))
    return rows


def bench_rasterize():
    rng = np.random.default_rng(1)
    n, height, width = 2_000_000, 64, 1024
    px_v = rng.integers(0, height, n)
    px_u = rng.integers(0, width, n)
    ranges = rng.uniform(1.0, 80.0, n)
    rows = []
    t_np = timeit(backend.rasterize_numpy, px_v, px_u, ranges, height, width)
    rows.append(("rasterize", "numpy", t_np, 1.0))
    if backend.HAVE_NUMBA:
        t_nb = timeit(backend.rasterize_numba, px_v, px_u, ranges,
                      height, width)
        rows.append(("rasterize", "numba", t_nb, t_np / t_nb))
    return rows


def main():
    print(f"numba available: {backend.HAVE_NUMBA}  "
          f"(selected backend: {'numba' if backend.USE_NUMBA else 'numpy'})")
    print(f"{'kernel':<16}{'backend':<10}{'best (ms)':>12}{'speedup':>10}")
    for name, which, t, speedup in bench_scan() + bench_rasterize():
        print(f"{name:<16}{which:<10}{t * 1e3:>12.3f}{speedup:>10.2f}x")


if __name__ == "__main__":
    main()
