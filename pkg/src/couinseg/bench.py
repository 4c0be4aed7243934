"""Timing of the kernel backends against each other, plus model cost figures."""
from __future__ import annotations

import time

import numpy as np

from . import kernels


def _best(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_workloads(seed=0, n_points=8000, grid=16, channels=16):
    """Representative inputs for every kernel at desk scale."""
    rng = np.random.default_rng(seed)
    coords = rng.random((n_points, 3))
    feats = rng.standard_normal((n_points, channels)).astype(np.float32)
    v = grid**3
    flat = (np.minimum((coords * grid).astype(np.int64), grid - 1) @ np.array([grid * grid, grid, 1])).astype(np.int64)
    grid_cl = rng.standard_normal((v, channels)).astype(np.float32)
    pos = rng.uniform(-1, grid, (v * 27, 3)).astype(np.float32)
    dout = rng.standard_normal((v * 27, channels)).astype(np.float32)
    sub = coords[: n_points // 4]
    return {
        "scatter_mean": lambda k: k.scatter_mean(feats, flat, v),
        "scatter_add_rows": lambda k: k.scatter_add_rows(v, flat, feats),
        "trilinear_sample": lambda k: k.trilinear_sample(grid_cl, grid, pos, True),
        "trilinear_sample_backward": lambda k: k.trilinear_sample_backward(dout, grid_cl, grid, pos, True, True),
        "ball_query": lambda k: k.ball_query(sub, coords, 1.0 / 16, 100),
        "farthest_point_sample": lambda k: k.farthest_point_sample(coords, n_points // 4, 0),
        "nearest_distances": lambda k: k.nearest_distances(sub, coords),
    }


def bench_kernels(repeats=3, seed=0, **sizes):
    """``{kernel: {backend: seconds}}`` for every available backend."""
    work = kernel_workloads(seed, **sizes)
    found = kernels.backends()
    out = {}
    for name, fn in work.items():
        out[name] = {b: _best(lambda: fn(mod), repeats) for b, mod in found.items()}
    return out


def format_table(results):
    backends = sorted({b for r in results.values() for b in r})
    lines = [f"{'kernel':28s}" + "".join(f"{b:>12s}" for b in backends) + f"{'speedup':>10s}"]
    for name, r in results.items():
        row = f"{name:28s}" + "".join(f"{r[b] * 1e3:10.2f}ms" for b in backends)
        if "python" in r and "compiled" in r:
            row += f"{r['python'] / r['compiled']:9.1f}x"
        lines.append(row)
    return "\n".join(lines)
