"""Analytic forward-pass FLOP counts and inference timing.

Every multiply, add, divide and exponential counts as one FLOP; compares
(ReLU, max-pooling, argmax) are free.  A linear layer ``rows x cin -> cout``
with bias is ``2 * rows * cin * cout`` (``cin`` products and ``cin`` adds per
output, the last add being the bias).  Counts follow the operations as
implemented, e.g. keys and values are unfolded separately.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

from .config import ModelConfig

N_SAMPLES = 27
TRILINEAR_TAPS = 8


def linear_flops(rows, cin, cout, bias=True):
    return rows * cout * (2 * cin if bias else 2 * cin - 1)


def conv3d_flops(m, cin, cout):
    """Dense 3x3x3 same-padded convolution with bias over an ``m^3`` grid."""
    return linear_flops(m**3, N_SAMPLES * cin, cout)


def softmax_flops(rows, n):
    # subtract max, exp, sum, divide
    return rows * (4 * n - 1)


def trilinear_flops(samples, c, weights=True):
    """``c`` channels from 8 taps per sample; optionally computing the 8 weights."""
    per = c * (2 * TRILINEAR_TAPS - 1)
    if weights:
        per += 2 * TRILINEAR_TAPS  # product of three 1-D factors per tap
    return samples * per


def level_sizes(n_points, ratio, levels=4):
    sizes = [int(n_points)]
    for _ in range(levels - 1):
        sizes.append(max(1, math.ceil(sizes[-1] * ratio - 1e-9)))
    return sizes


@dataclass
class FlopReport:
    total: int
    by_category: dict
    by_level: list = field(default_factory=list)


def count_flops(config: ModelConfig, n_points, neighbors=None, sizes=None) -> FlopReport:
    """Forward FLOPs for ``n_points`` input points.

    ``neighbors[i]`` is the neighbour-table width at level ``i`` (each query
    evaluates that many edges); it defaults to 1 at level 1 and to
    ``max_neighbors`` (capped by the previous level's size) further up.
    ``sizes`` overrides the per-level point counts.
    """
    sizes = list(sizes) if sizes is not None else level_sizes(n_points, config.downsample_ratio)
    if neighbors is None:
        neighbors = [1] + [min(config.max_neighbors, sizes[i - 1]) for i in range(1, 4)]
    cat = dict(point=0, grid_io=0, conv=0, attention=0, merge=0, head=0)
    by_level = []
    prev_c = config.input_channels
    grids = config.grid_sizes()
    for i, c in enumerate(config.channels):
        q, src, m = sizes[i], sizes[i - 1] if i else sizes[0], grids[i]
        e = q * neighbors[i]
        lv = dict(point=linear_flops(src, prev_c, c, bias=False) + linear_flops(e, 3, c) + e * c)
        lv["point"] += e * 3 * 2  # relative offsets: subtract, divide by radius
        if config.grid_path:
            v = m**3
            lv["grid_io"] = q * c + v * c  # scatter sums and mean divide
            lv["grid_io"] += trilinear_flops(q, c)  # devoxelize
            lv["merge"] = q * c
        if config.enable_grid_embeddings:
            lv["conv"] = 2 * (2 * conv3d_flops(m, c, c) + v * c)
        if config.enable_graph_reasoning:
            s = v * N_SAMPLES
            a = 3 * linear_flops(v, c, c, bias=False) + linear_flops(v, c, 3 * N_SAMPLES)
            a += 2 * (s * 3 + trilinear_flops(s, c))  # keys and values at base + offset
            a += s * (2 * c - 1) + 2 * s  # dot products, scale, positional term
            a += softmax_flops(v, N_SAMPLES)
            a += v * c * (2 * N_SAMPLES - 1)
            lv["attention"] = a
        for k, val in lv.items():
            cat[k] += val
        by_level.append(lv)
        prev_c = c
    n = sizes[0]
    head = n * config.channels[-1] * (2 * 3 - 1)  # 3-NN weighted sum
    width = config.channels[-1]
    if config.head_skip:
        head += n * config.channels[0]
        width += config.channels[0]
    for out in config.head:
        head += linear_flops(n, width, out)
        width = out
    cat["head"] = head
    return FlopReport(int(sum(cat.values())), cat, by_level)


def count_flops_for_hierarchy(config: ModelConfig, hierarchy) -> FlopReport:
    """FLOPs with the level sizes and padded table widths of a built hierarchy."""
    sizes = [len(lv) for lv in hierarchy.levels]
    widths = [lv.padded().shape[1] for lv in hierarchy.levels]
    return count_flops(config, sizes[0], widths, sizes)


def time_inference(case, params, config: ModelConfig, repeats=3):
    """Best wall-clock seconds of ``infer`` on an already loaded case (no I/O)."""
    from .network import infer

    best = math.inf
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        infer(case.points, case.hierarchy, params, config)
        best = min(best, time.perf_counter() - t0)
    return best
