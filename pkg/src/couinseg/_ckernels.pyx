# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  Mirrors ``_pykernels`` function by function."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, INFINITY

cnp.import_array()

ctypedef fused real:
    float
    double

DEF EXHAUSTIVE_BELOW = 512


def scatter_mean(real[:, ::1] feats, cnp.int64_t[::1] flat, Py_ssize_t n_voxels):
    cdef Py_ssize_t n = feats.shape[0], c = feats.shape[1], i, ch, v
    dtype = np.float32 if real is float else np.float64
    sums_arr = np.zeros((n_voxels, c), dtype=dtype)
    counts_arr = np.zeros(n_voxels, dtype=np.int64)
    cdef real[:, ::1] sums = sums_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    for i in range(n):
        v = flat[i]
        counts[v] += 1
        for ch in range(c):
            sums[v, ch] += feats[i, ch]
    for v in range(n_voxels):
        if counts[v] > 0:
            for ch in range(c):
                sums[v, ch] = sums[v, ch] / <real>counts[v]
    return sums_arr, counts_arr


def scatter_add_rows(Py_ssize_t n_rows, cnp.int64_t[::1] idx, real[:, ::1] src):
    cdef Py_ssize_t e, ch, c = src.shape[1], row
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_rows, c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    for e in range(src.shape[0]):
        row = idx[e]
        for ch in range(c):
            out[row, ch] += src[e, ch]
    return out_arr


cdef inline void _corners(real px, real py, real pz, Py_ssize_t m, bint zero_pad,
                          Py_ssize_t* flat, real* w, real* wax, bint* valid) noexcept nogil:
    # wax holds per-axis weights laid out [corner*3 + axis]
    cdef real fx, fy, fz, tx, ty, tz, ax, ay, az
    cdef Py_ssize_t bx, by, bz, ix, iy, iz, corner, dx, dy, dz
    if not zero_pad:
        if px < 0: px = 0
        if py < 0: py = 0
        if pz < 0: pz = 0
        if px > m - 1: px = m - 1
        if py > m - 1: py = m - 1
        if pz > m - 1: pz = m - 1
    fx = floor(px); fy = floor(py); fz = floor(pz)
    tx = px - fx; ty = py - fy; tz = pz - fz
    bx = <Py_ssize_t>fx; by = <Py_ssize_t>fy; bz = <Py_ssize_t>fz
    corner = 0
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                ix = bx + dx; iy = by + dy; iz = bz + dz
                if zero_pad:
                    valid[corner] = (0 <= ix < m) and (0 <= iy < m) and (0 <= iz < m)
                else:
                    valid[corner] = True
                if ix < 0: ix = 0
                if iy < 0: iy = 0
                if iz < 0: iz = 0
                if ix > m - 1: ix = m - 1
                if iy > m - 1: iy = m - 1
                if iz > m - 1: iz = m - 1
                flat[corner] = (ix * m + iy) * m + iz
                ax = tx if dx else 1 - tx
                ay = ty if dy else 1 - ty
                az = tz if dz else 1 - tz
                wax[corner * 3] = ax
                wax[corner * 3 + 1] = ay
                wax[corner * 3 + 2] = az
                w[corner] = ax * ay * az if valid[corner] else 0
                corner += 1


def trilinear_sample(real[:, ::1] grid, Py_ssize_t m, real[:, ::1] pos, bint zero_pad):
    cdef Py_ssize_t p, corner, ch, c = grid.shape[1], n = pos.shape[0]
    cdef Py_ssize_t flat[8]
    cdef real w[8]
    cdef real wax[24]
    cdef bint valid[8]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    with nogil:
        for p in range(n):
            _corners(pos[p, 0], pos[p, 1], pos[p, 2], m, zero_pad, flat, w, wax, valid)
            for corner in range(8):
                if w[corner] != 0:
                    for ch in range(c):
                        out[p, ch] += w[corner] * grid[flat[corner], ch]
    return out_arr


def trilinear_sample_backward(real[:, ::1] dout, real[:, ::1] grid, Py_ssize_t m,
                              real[:, ::1] pos, bint zero_pad, bint need_pos_grad):
    cdef Py_ssize_t p, corner, ch, c = grid.shape[1], n = pos.shape[0], v
    cdef Py_ssize_t flat[8]
    cdef real w[8]
    cdef real wax[24]
    cdef bint valid[8]
    cdef real acc, sx, sy, sz
    dtype = np.float32 if real is float else np.float64
    dgrid_arr = np.zeros((grid.shape[0], c), dtype=dtype)
    dpos_arr = np.zeros((n, 3), dtype=dtype)
    cdef real[:, ::1] dgrid = dgrid_arr
    cdef real[:, ::1] dpos = dpos_arr
    with nogil:
        for p in range(n):
            _corners(pos[p, 0], pos[p, 1], pos[p, 2], m, zero_pad, flat, w, wax, valid)
            for corner in range(8):
                v = flat[corner]
                if w[corner] != 0:
                    for ch in range(c):
                        dgrid[v, ch] += w[corner] * dout[p, ch]
                if need_pos_grad and valid[corner]:
                    acc = 0
                    for ch in range(c):
                        acc = acc + dout[p, ch] * grid[v, ch]
                    sx = 1 if corner & 4 else -1
                    sy = 1 if corner & 2 else -1
                    sz = 1 if corner & 1 else -1
                    dpos[p, 0] += acc * sx * wax[corner * 3 + 1] * wax[corner * 3 + 2]
                    dpos[p, 1] += acc * sy * wax[corner * 3] * wax[corner * 3 + 2]
                    dpos[p, 2] += acc * sz * wax[corner * 3] * wax[corner * 3 + 1]
    if not need_pos_grad:
        return dgrid_arr, None
    return dgrid_arr, dpos_arr


cdef inline double _sq(double[:, ::1] a, Py_ssize_t i, double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef double dx = a[i, 0] - b[j, 0]
    cdef double dy = a[i, 1] - b[j, 1]
    cdef double dz = a[i, 2] - b[j, 2]
    return dx * dx + dy * dy + dz * dz


cdef inline void _insert(double d2, Py_ssize_t j, double* bd, cnp.int64_t* bi,
                         Py_ssize_t* count, Py_ssize_t k) noexcept nogil:
    # keep the k smallest (d2, j) pairs sorted ascending
    cdef Py_ssize_t pos
    if count[0] == k:
        if d2 > bd[k - 1] or (d2 == bd[k - 1] and j > bi[k - 1]):
            return
        pos = k - 1
    else:
        pos = count[0]
        count[0] += 1
    while pos > 0 and (bd[pos - 1] > d2 or (bd[pos - 1] == d2 and bi[pos - 1] > j)):
        bd[pos] = bd[pos - 1]
        bi[pos] = bi[pos - 1]
        pos -= 1
    bd[pos] = d2
    bi[pos] = j


def ball_query(query, source, double r, Py_ssize_t k):
    cdef double[:, ::1] qv = np.ascontiguousarray(query, dtype=np.float64)
    cdef double[:, ::1] sv = np.ascontiguousarray(source, dtype=np.float64)
    cdef Py_ssize_t nq = qv.shape[0], ns = sv.shape[0], i, j, cnt, a, ci, cj, ck
    cdef Py_ssize_t cx, cy, cz, nx, ny, nz, key, ox, oy, oz, s
    cdef double r2 = r * r, d2, best, cell
    cdef double lo[3]
    buf_d = np.empty(k, dtype=np.float64)
    buf_i = np.empty(k, dtype=np.int64)
    cdef double[::1] bd = buf_d
    cdef cnp.int64_t[::1] bi = buf_i
    out_idx = np.empty(nq * k, dtype=np.int64)
    ptr_arr = np.zeros(nq + 1, dtype=np.int64)
    fb_arr = np.zeros(nq, dtype=bool)
    cdef cnp.int64_t[::1] oidx = out_idx
    cdef cnp.int64_t[::1] ptr = ptr_arr
    cdef cnp.npy_bool[::1] fb = fb_arr
    cdef cnp.int64_t[::1] order, start
    cdef cnp.int64_t[:, ::1] scell
    cdef bint bucket = ns >= EXHAUSTIVE_BELOW
    if bucket:
        cell = r * (1.0 + 1e-9)
        lo_arr = np.asarray(sv).min(axis=0)
        lo[0] = lo_arr[0]; lo[1] = lo_arr[1]; lo[2] = lo_arr[2]
        scell_arr = np.floor((np.asarray(sv) - lo_arr) / cell).astype(np.int64)
        dims = scell_arr.max(axis=0) + 1
        nx, ny, nz = int(dims[0]), int(dims[1]), int(dims[2])
        if nx * ny * nz > 8_000_000:
            bucket = False
    if bucket:
        scell = scell_arr
        skey = (scell_arr[:, 0] * ny + scell_arr[:, 1]) * nz + scell_arr[:, 2]
        order = np.argsort(skey, kind="stable").astype(np.int64)
        start = np.searchsorted(skey[np.asarray(order)], np.arange(nx * ny * nz + 1)).astype(np.int64)
    with nogil:
        for i in range(nq):
            cnt = 0
            if bucket:
                cx = <Py_ssize_t>floor((qv[i, 0] - lo[0]) / cell)
                cy = <Py_ssize_t>floor((qv[i, 1] - lo[1]) / cell)
                cz = <Py_ssize_t>floor((qv[i, 2] - lo[2]) / cell)
                for ox in range(-1, 2):
                    ci = cx + ox
                    if ci < 0 or ci >= nx:
                        continue
                    for oy in range(-1, 2):
                        cj = cy + oy
                        if cj < 0 or cj >= ny:
                            continue
                        for oz in range(-1, 2):
                            ck = cz + oz
                            if ck < 0 or ck >= nz:
                                continue
                            key = (ci * ny + cj) * nz + ck
                            for s in range(start[key], start[key + 1]):
                                j = order[s]
                                d2 = _sq(qv, i, sv, j)
                                if d2 <= r2:
                                    _insert(d2, j, &bd[0], &bi[0], &cnt, k)
            else:
                for j in range(ns):
                    d2 = _sq(qv, i, sv, j)
                    if d2 <= r2:
                        _insert(d2, j, &bd[0], &bi[0], &cnt, k)
            if cnt == 0:
                fb[i] = True
                best = INFINITY
                for j in range(ns):
                    d2 = _sq(qv, i, sv, j)
                    if d2 < best:
                        best = d2
                        bi[0] = j
                cnt = 1
            for a in range(cnt):
                oidx[ptr[i] + a] = bi[a]
            ptr[i + 1] = ptr[i] + cnt
    return ptr_arr, out_idx[:ptr_arr[nq]].copy(), fb_arr


def farthest_point_sample(coords, Py_ssize_t n_select, Py_ssize_t start):
    cdef double[:, ::1] cv = np.ascontiguousarray(coords, dtype=np.float64)
    cdef Py_ssize_t n = cv.shape[0], i, j, arg
    best_arr = np.full(n, INFINITY)
    sel_arr = np.empty(n_select, dtype=np.int64)
    cdef double[::1] best = best_arr
    cdef cnp.int64_t[::1] sel = sel_arr
    cdef double d2, mx
    arg = start
    with nogil:
        for i in range(n_select):
            sel[i] = arg
            mx = -1.0
            for j in range(n):
                d2 = _sq(cv, j, cv, arg)
                if d2 < best[j]:
                    best[j] = d2
            if i + 1 < n_select:
                for j in range(n):
                    if best[j] > mx:
                        mx = best[j]
                        arg = j
    return sel_arr


def nearest_distances(a, b):
    """Grid-bucketed nearest-neighbour distance with expanding cell rings."""
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t na = av.shape[0], nb = bv.shape[0], i, j, s, ring, ox, oy, oz
    cdef Py_ssize_t cx, cy, cz, ci, cj, ck, nx, ny, nz, key, maxring
    cdef double best, d2, cell, reach
    cdef double lo[3]
    b_arr = np.asarray(bv)
    lo_arr = b_arr.min(axis=0)
    extent = float((b_arr.max(axis=0) - lo_arr).max())
    cell = extent / max(round(nb ** (1.0 / 3.0)), 1)
    if cell <= 0:
        cell = 1.0
    lo[0] = lo_arr[0]; lo[1] = lo_arr[1]; lo[2] = lo_arr[2]
    bcell_arr = np.floor((b_arr - lo_arr) / cell).astype(np.int64)
    dims = bcell_arr.max(axis=0) + 1
    nx, ny, nz = int(dims[0]), int(dims[1]), int(dims[2])
    bkey = (bcell_arr[:, 0] * ny + bcell_arr[:, 1]) * nz + bcell_arr[:, 2]
    order_arr = np.argsort(bkey, kind="stable").astype(np.int64)
    start_arr = np.searchsorted(bkey[order_arr], np.arange(nx * ny * nz + 1)).astype(np.int64)
    cdef cnp.int64_t[::1] order = order_arr
    cdef cnp.int64_t[::1] start = start_arr
    out_arr = np.empty(na, dtype=np.float64)
    cdef double[::1] out = out_arr
    maxring = max(nx, ny, nz)
    with nogil:
        for i in range(na):
            best = INFINITY
            cx = <Py_ssize_t>floor((av[i, 0] - lo[0]) / cell)
            cy = <Py_ssize_t>floor((av[i, 1] - lo[1]) / cell)
            cz = <Py_ssize_t>floor((av[i, 2] - lo[2]) / cell)
            # clamping a query outside the grid keeps the ring distance bound valid
            cx = min(max(cx, 0), nx - 1)
            cy = min(max(cy, 0), ny - 1)
            cz = min(max(cz, 0), nz - 1)
            ring = 0
            while True:
                for ox in range(-ring, ring + 1):
                    ci = cx + ox
                    if ci < 0 or ci >= nx:
                        continue
                    for oy in range(-ring, ring + 1):
                        cj = cy + oy
                        if cj < 0 or cj >= ny:
                            continue
                        for oz in range(-ring, ring + 1):
                            if ox != -ring and ox != ring and oy != -ring and oy != ring \
                                    and oz != -ring and oz != ring:
                                continue
                            ck = cz + oz
                            if ck < 0 or ck >= nz:
                                continue
                            key = (ci * ny + cj) * nz + ck
                            for s in range(start[key], start[key + 1]):
                                j = order[s]
                                d2 = _sq(av, i, bv, j)
                                if d2 < best:
                                    best = d2
                # anything in ring+1 or beyond is at least ring*cell away; the
                # margin absorbs rounding in the cell assignment
                reach = ring * cell * (1.0 - 1e-9)
                if best <= reach * reach:
                    break
                if ring > maxring:
                    break
                ring += 1
            out[i] = sqrt(best)
    return out_arr
