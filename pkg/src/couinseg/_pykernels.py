"""Pure-numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``COUINSEG_PURE_PYTHON=1`` is set.  Every function here has an identical
signature and semantics in ``_ckernels.pyx``.

Grids are channels-last ``(M**3, C)`` arrays with C-order voxel flattening
``v = (ix * M + iy) * M + iz``.
"""
import numpy as np
from scipy.spatial import cKDTree

EXHAUSTIVE_BELOW = 512

_CORNERS = np.array(
    [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64
)


def _sqdist(a, b):
    # fixed evaluation order, shared with the compiled kernels and the oracles
    dx = a[..., 0] - b[..., 0]
    dy = a[..., 1] - b[..., 1]
    dz = a[..., 2] - b[..., 2]
    return dx * dx + dy * dy + dz * dz


def scatter_mean(feats, flat, n_voxels):
    """Mean of ``feats`` rows per voxel id in ``flat``; returns (grid, counts)."""
    n, c = feats.shape
    counts = np.bincount(flat, minlength=n_voxels).astype(np.int64)
    sums = np.zeros((n_voxels, c), dtype=feats.dtype)
    np.add.at(sums, flat, feats)
    grid = np.zeros_like(sums)
    occupied = counts > 0
    grid[occupied] = sums[occupied] / counts[occupied, None].astype(feats.dtype)
    return grid, counts


def scatter_add_rows(n_rows, idx, src):
    """out[idx[e]] += src[e] for every row e, accumulated in row order."""
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    np.add.at(out, idx, src)
    return out


def _corner_setup(pos, m, zero_pad):
    if not zero_pad:
        pos = np.clip(pos, 0.0, m - 1)
    base = np.floor(pos)
    t = pos - base
    base = base.astype(np.int64)
    idx = base[:, None, :] + _CORNERS[None, :, :]  # (P, 8, 3)
    if zero_pad:
        valid = np.all((idx >= 0) & (idx < m), axis=2)
    else:
        valid = np.ones(idx.shape[:2], dtype=bool)
    idx = np.clip(idx, 0, m - 1)
    flat = (idx[..., 0] * m + idx[..., 1]) * m + idx[..., 2]
    # per-axis weights: corner offset 0 -> 1 - t, offset 1 -> t
    wax = np.where(_CORNERS[None, :, :] == 1, t[:, None, :], 1.0 - t[:, None, :])
    return flat, valid, wax.astype(pos.dtype, copy=False)


def trilinear_sample(grid, m, pos, zero_pad):
    """Sample a channels-last grid at continuous voxel-index positions.

    ``zero_pad=True`` reads zeros outside ``[0, m)``; otherwise positions are
    clamped to ``[0, m-1]`` before interpolation.
    """
    flat, valid, wax = _corner_setup(pos, m, zero_pad)
    w = wax[..., 0] * wax[..., 1] * wax[..., 2] * valid
    out = np.zeros((pos.shape[0], grid.shape[1]), dtype=grid.dtype)
    for corner in range(8):
        out += w[:, corner, None] * grid[flat[:, corner]]
    return out


def trilinear_sample_backward(dout, grid, m, pos, zero_pad, need_pos_grad):
    """Gradients of ``trilinear_sample`` w.r.t. grid values and positions."""
    flat, valid, wax = _corner_setup(pos, m, zero_pad)
    w = wax[..., 0] * wax[..., 1] * wax[..., 2] * valid
    dgrid = np.zeros_like(grid)
    for corner in range(8):
        np.add.at(dgrid, flat[:, corner], w[:, corner, None] * dout)
    if not need_pos_grad:
        return dgrid, None
    dpos = np.zeros((pos.shape[0], 3), dtype=grid.dtype)
    sign = np.where(_CORNERS == 1, 1.0, -1.0).astype(grid.dtype)
    for corner in range(8):
        vals = np.einsum("pc,pc->p", dout, grid[flat[:, corner]]) * valid[:, corner]
        wc = wax[:, corner, :]
        dpos[:, 0] += vals * sign[corner, 0] * wc[:, 1] * wc[:, 2]
        dpos[:, 1] += vals * sign[corner, 1] * wc[:, 0] * wc[:, 2]
        dpos[:, 2] += vals * sign[corner, 2] * wc[:, 0] * wc[:, 1]
    return dgrid, dpos


def _nearest_fallback(query, source):
    d2 = _sqdist(query[:, None, :], source[None, :, :])
    return np.argmin(d2, axis=1)  # first minimum = lowest index


def _candidate_pairs(query, source, r):
    q, s = len(query), len(source)
    if s < EXHAUSTIVE_BELOW:
        qi = np.repeat(np.arange(q), s)
        sj = np.tile(np.arange(s), q)
        return qi, sj
    cell = r * (1.0 + 1e-9)
    lo = source.min(axis=0)
    scell = np.floor((source - lo) / cell).astype(np.int64)
    dims = scell.max(axis=0) + 1
    qcell = np.floor((query - lo) / cell).astype(np.int64)
    skey = (scell[:, 0] * dims[1] + scell[:, 1]) * dims[2] + scell[:, 2]
    order = np.argsort(skey, kind="stable")
    sorted_keys = skey[order]
    qis, sjs = [], []
    for ox in (-1, 0, 1):
        for oy in (-1, 0, 1):
            for oz in (-1, 0, 1):
                nc = qcell + np.array([ox, oy, oz])
                ok = np.all((nc >= 0) & (nc < dims), axis=1)
                qids = np.nonzero(ok)[0]
                nc = nc[ok]
                key = (nc[:, 0] * dims[1] + nc[:, 1]) * dims[2] + nc[:, 2]
                start = np.searchsorted(sorted_keys, key, side="left")
                stop = np.searchsorted(sorted_keys, key, side="right")
                cnt = stop - start
                total = int(cnt.sum())
                if total == 0:
                    continue
                first = np.repeat(start - np.cumsum(cnt) + cnt, cnt)
                qis.append(np.repeat(qids, cnt))
                sjs.append(order[first + np.arange(total)])
    if not qis:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(qis), np.concatenate(sjs)


def ball_query(query, source, r, k):
    """Up to ``k`` nearest sources within ``r`` per query, CSR layout.

    Returns ``(ptr, idx, fallback)``; queries with an empty ball get their
    single nearest source and ``fallback[q] = True``.
    """
    query = np.ascontiguousarray(query, dtype=np.float64)
    source = np.ascontiguousarray(source, dtype=np.float64)
    q = len(query)
    r2 = r * r
    qi, sj = _candidate_pairs(query, source, r)
    d2 = _sqdist(query[qi], source[sj])
    keep = d2 <= r2
    qi, sj, d2 = qi[keep], sj[keep], d2[keep]
    order = np.lexsort((sj, d2, qi))
    qi, sj = qi[order], sj[order]
    counts = np.bincount(qi, minlength=q)
    starts = np.cumsum(counts) - counts
    rank = np.arange(len(qi)) - starts[qi]
    sel = rank < k
    qi, sj = qi[sel], sj[sel]
    counts = np.minimum(counts, k)
    fallback = counts == 0
    if fallback.any():
        empty = np.nonzero(fallback)[0]
        nearest = _nearest_fallback(query[empty], source)
        qi = np.concatenate([qi, empty])
        sj = np.concatenate([sj, nearest])
        order = np.argsort(qi, kind="stable")
        qi, sj = qi[order], sj[order]
        counts[empty] = 1
    ptr = np.zeros(q + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, sj.astype(np.int64), fallback


def farthest_point_sample(coords, n_select, start):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    sel = np.empty(n_select, dtype=np.int64)
    sel[0] = start
    best = _sqdist(coords, coords[start])
    for i in range(1, n_select):
        j = int(np.argmax(best))
        sel[i] = j
        np.minimum(best, _sqdist(coords, coords[j]), out=best)
    return sel


def nearest_distances(a, b):
    """Euclidean distance from each row of ``a`` to its nearest row of ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    tree = cKDTree(b)
    dist, idx = tree.query(a, k=1)
    out = np.sqrt(_sqdist(a, b[idx]))
    # the tree's own arithmetic may rank near-ties differently; rescan them
    # with the shared distance formula so results match a brute-force scan
    for i, cand in enumerate(tree.query_ball_point(a, dist * (1 + 1e-9) + 1e-12)):
        if len(cand) > 1:
            out[i] = np.sqrt(_sqdist(a[i:i + 1], b[cand]).min())
    return out
