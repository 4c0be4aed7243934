"""Point <-> grid transfer and deformable neighbourhood sampling.

Grids are ``(C, M, M, M)`` arrays indexed ``[c, ix, iy, iz]``.  Voxel ``i``
along an axis covers ``[i/M, (i+1)/M)`` in normalized coordinates and has its
centre at ``(i + 0.5) / M``.
"""
import numpy as np

from .. import kernels
from ..errors import DomainError

# 3x3x3 neighbourhood in C order, so m = 13 is the centre voxel
NEIGHBORHOOD = np.array(
    [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64
)
CENTER = 13


def _check_coords(coords):
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DomainError("coords must be an (N, 3) array")
    if len(coords) and (coords.min() < 0 or coords.max() > 1 or not np.isfinite(coords).all()):
        raise DomainError("coords must lie in [0, 1]")
    return coords


def to_channels_last(grid):
    c = grid.shape[0]
    return np.ascontiguousarray(grid.reshape(c, -1).T)


def to_channels_first(cl, m):
    return np.ascontiguousarray(cl.T).reshape(cl.shape[1], m, m, m)


def voxel_index(coords, m):
    idx = np.minimum(np.floor(coords * m).astype(np.int64), m - 1)
    return (idx[:, 0] * m + idx[:, 1]) * m + idx[:, 2]


def voxelize_forward(feats, coords, m):
    """Mean-pool point features into an ``M^3`` grid; empty voxels stay zero."""
    coords = _check_coords(coords)
    if m < 1:
        raise DomainError("grid size must be >= 1")
    feats = np.ascontiguousarray(feats)
    flat = voxel_index(coords, m)
    grid, counts = kernels.scatter_mean(feats, flat, m**3)
    return to_channels_first(grid, m), (flat, counts, m)


def voxelize_backward(dgrid, cache):
    flat, counts, m = cache
    dcl = to_channels_last(dgrid)
    return dcl[flat] / counts[flat, None].astype(dcl.dtype)


def devoxelize_forward(grid, coords):
    """Trilinear interpolation between voxel centres, clamped at the border centres."""
    coords = _check_coords(coords)
    m = grid.shape[1]
    pos = np.ascontiguousarray(coords * m - 0.5, dtype=grid.dtype)
    cl = to_channels_last(grid)
    out = kernels.trilinear_sample(cl, m, pos, False)
    return out, (pos, m, cl)


def devoxelize_backward(dout, cache):
    pos, m, cl = cache
    dcl, _ = kernels.trilinear_sample_backward(
        np.ascontiguousarray(dout, dtype=cl.dtype), cl, m, pos, False, False
    )
    return to_channels_first(dcl, m)


def base_positions(m):
    """(M^3, 27, 3) voxel-unit centres of every voxel's 3x3x3 neighbourhood."""
    ii = np.stack(np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij"), -1)
    return ii.reshape(-1, 1, 3) + NEIGHBORHOOD[None, :, :]


def unfold_cl_forward(cl, m, offsets):
    """Channels-last core of :func:`deformable_unfold_forward`."""
    v = m**3
    pos = (base_positions(m) + offsets).astype(cl.dtype).reshape(v * 27, 3)
    pos = np.ascontiguousarray(pos)
    samples = kernels.trilinear_sample(cl, m, pos, True)
    return samples.reshape(v, 27, -1), (pos, m, cl)


def unfold_cl_backward(dsamples, cache, need_offset_grad=True):
    pos, m, cl = cache
    d = np.ascontiguousarray(dsamples.reshape(len(pos), -1), dtype=cl.dtype)
    dcl, dpos = kernels.trilinear_sample_backward(d, cl, m, pos, True, need_offset_grad)
    if dpos is not None:
        dpos = dpos.reshape(m**3, 27, 3)
    return dcl, dpos


def deformable_unfold_forward(grid, offsets):
    """Sample 27 offset neighbours per voxel with zero padding outside the grid.

    ``offsets`` has shape ``(M^3, 27, 3)`` in voxel units, added to the
    integer centres of the 3x3x3 neighbourhood.  Returns ``(M^3, 27, C)``.
    """
    m = grid.shape[1]
    offsets = np.asarray(offsets)
    if offsets.shape != (m**3, 27, 3):
        raise DomainError(f"offsets must have shape {(m**3, 27, 3)}, got {offsets.shape}")
    if not np.isfinite(offsets).all():
        raise DomainError("offsets must be finite")
    return unfold_cl_forward(to_channels_last(grid), m, offsets)


def deformable_unfold_backward(dsamples, cache):
    """Returns ``(dgrid, doffsets)``."""
    dcl, dpos = unfold_cl_backward(dsamples, cache, True)
    return to_channels_first(dcl, cache[1]), dpos
