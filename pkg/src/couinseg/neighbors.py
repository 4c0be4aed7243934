"""Four-level point hierarchy with precomputed ball-query neighbourhoods.

Level 1 holds every input point with neighbours drawn from itself; each
later level is a farthest-point subsample of the previous level, with
neighbours drawn from the previous level.  Radii double per level so the
ball tracks the halving voxel grid.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, DomainError, EmptyInputError, FormatError

N_LEVELS = 4


@dataclass(frozen=True)
class HierarchyConfig:
    grid_size_level1: int = 64
    radius_level1: float = 1.0 / (2 * 64)
    downsample_ratio: float = 0.25
    max_neighbors: int = 100
    interp_neighbors: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.grid_size_level1 % 2 ** (N_LEVELS - 1):
            raise ConfigError("grid_size_level1 must be divisible by 8")
        if not 0 < self.downsample_ratio <= 1:
            raise ConfigError("downsample_ratio must lie in (0, 1]")
        if self.radius_level1 <= 0 or self.max_neighbors < 1:
            raise ConfigError("radius must be positive and max_neighbors >= 1")

    @classmethod
    def for_grid(cls, grid_size_level1, **kw):
        """Config whose first radius is half a level-1 voxel, ``1 / (2 M_1)``."""
        return cls(grid_size_level1=grid_size_level1, radius_level1=1.0 / (2 * grid_size_level1), **kw)

    def radii(self):
        return [self.radius_level1 * 2**i for i in range(N_LEVELS)]

    def grid_sizes(self):
        return [self.grid_size_level1 // 2**i for i in range(N_LEVELS)]


@dataclass
class LevelData:
    parent_indices: np.ndarray  # ids into the previous level (level 1: identity)
    coords: np.ndarray
    nbr_ptr: np.ndarray
    nbr_idx: np.ndarray
    fallback: np.ndarray  # queries whose ball was empty and got their nearest point

    def __len__(self):
        return len(self.coords)

    def neighbor_list(self, j):
        return self.nbr_idx[self.nbr_ptr[j] : self.nbr_ptr[j + 1]]

    def counts(self):
        return np.diff(self.nbr_ptr)

    def padded(self):
        """(Q, K) neighbour table, short rows padded with their first entry.

        Padding by repetition is harmless for max aggregation.
        """
        counts = self.counts()
        k = int(counts.max())
        col = np.arange(k)[None, :]
        pos = self.nbr_ptr[:-1, None] + np.where(col < counts[:, None], col, 0)
        return self.nbr_idx[pos]


@dataclass
class Hierarchy:
    levels: list
    radii: list
    grid_sizes: list
    max_neighbors: int
    interp_idx: np.ndarray = field(default=None)  # level-4 -> level-1 IDW
    interp_w: np.ndarray = field(default=None)

    def displacements(self, level):
        """coord(neighbour) - coord(query) for every CSR entry of ``level`` (0-based)."""
        lv = self.levels[level]
        source = lv.coords if level == 0 else self.levels[level - 1].coords
        q = np.repeat(np.arange(len(lv)), lv.counts())
        return source[lv.nbr_idx] - lv.coords[q]


def ball_query(query_coords, source_coords, r, k):
    """Up to ``k`` nearest sources within ``r`` of each query.

    Returns CSR ``(ptr, idx, fallback)``; each list is sorted by distance with
    ties broken by source index.  A query with no source in range receives its
    single nearest source and is flagged in ``fallback``.
    """
    if len(source_coords) == 0:
        raise EmptyInputError("ball query over an empty source set")
    if r <= 0 or k < 1:
        raise DomainError("ball query needs r > 0 and k >= 1")
    return kernels.ball_query(query_coords, source_coords, float(r), int(k))


def downsample(coords, ratio, seed):
    """``ceil(N * ratio)`` farthest-point-sampled indices, seeded start point."""
    n = len(coords)
    if n == 0:
        raise EmptyInputError("cannot downsample an empty point set")
    if not 0 < ratio <= 1:
        raise DomainError("ratio must lie in (0, 1]")
    if ratio == 1:
        return np.arange(n, dtype=np.int64)
    n_select = max(1, math.ceil(n * ratio - 1e-9))
    start = int(np.random.default_rng(seed).integers(n))
    return kernels.farthest_point_sample(coords, n_select, start)


def idw_weights(source, target, k=3, eps=1e-8):
    """Inverse-distance weights of the ``k`` nearest sources for every target."""
    k = min(k, len(source))
    idx = np.empty((len(target), k), dtype=np.int64)
    dist = np.empty((len(target), k))
    for lo in range(0, len(target), 4096):
        t = target[lo : lo + 4096]
        d2 = ((t[:, None, :] - source[None, :, :]) ** 2).sum(-1)
        part = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[lo : lo + 4096] = part
        dist[lo : lo + 4096] = np.sqrt(np.take_along_axis(d2, part, axis=1))
    w = 1.0 / (dist + eps)
    return idx, w / w.sum(axis=1, keepdims=True)


def build_hierarchy(coords, config: HierarchyConfig) -> Hierarchy:
    """Precompute the per-level point sets and neighbour lists for ``coords``."""
    coords = np.asarray(coords, dtype=np.float64)
    if len(coords) < N_LEVELS:
        raise DomainError(f"need at least {N_LEVELS} points, got {len(coords)}")
    radii = config.radii()
    levels = []
    prev = coords
    for i in range(N_LEVELS):
        if i == 0:
            parent = np.arange(len(coords), dtype=np.int64)
        else:
            parent = downsample(prev, config.downsample_ratio, seed=[config.seed, i])
        cur = prev[parent]
        ptr, idx, fb = ball_query(cur, prev, radii[i], config.max_neighbors)
        levels.append(LevelData(parent, cur, ptr, idx, fb))
        prev = cur
    interp_idx, interp_w = idw_weights(levels[-1].coords, coords, config.interp_neighbors)
    return Hierarchy(levels, radii, config.grid_sizes(), config.max_neighbors, interp_idx, interp_w)


# -- on-disk cache -------------------------------------------------------------

_ARRAYS = ("parent_indices", "coords", "nbr_ptr", "nbr_idx", "fallback")


def cache_key(coords, config: HierarchyConfig) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(coords, dtype="<f8").tobytes())
    h.update(json.dumps(asdict(config), sort_keys=True).encode())
    return h.hexdigest()[:32]


def save_hierarchy(hier: Hierarchy, directory, key=""):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0

    def add(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr)
        dt = "<f8" if arr.dtype.kind == "f" else ("|u1" if arr.dtype == bool else "<i8")
        raw = arr.astype(dt).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for i, lv in enumerate(hier.levels):
        for name in _ARRAYS:
            add(f"level{i}.{name}", getattr(lv, name))
    add("interp_idx", hier.interp_idx)
    add("interp_w", hier.interp_w)
    manifest = {
        "key": key,
        "radii": hier.radii,
        "grid_sizes": hier.grid_sizes,
        "max_neighbors": hier.max_neighbors,
        "arrays": entries,
    }
    _atomic_write(directory / "arrays.bin", b"".join(blobs))
    _atomic_write(directory / "manifest.json", json.dumps(manifest, indent=1).encode())


def load_hierarchy(directory) -> Hierarchy:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad hierarchy manifest: {exc}") from exc
    blob = (directory / "arrays.bin").read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(blob, dtype=dt, count=n, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = a.astype(bool) if dt == np.dtype("|u1") else a.astype(dt.newbyteorder("="))
    levels = [
        LevelData(*(arrays[f"level{i}.{name}"] for name in _ARRAYS)) for i in range(N_LEVELS)
    ]
    return Hierarchy(
        levels,
        manifest["radii"],
        manifest["grid_sizes"],
        manifest["max_neighbors"],
        arrays["interp_idx"],
        arrays["interp_w"],
    )


def cached_hierarchy(coords, config: HierarchyConfig, cache_dir) -> Hierarchy:
    """Build once per (coords, config) and reuse across epochs and runs."""
    key = cache_key(coords, config)
    path = Path(cache_dir) / key
    if (path / "manifest.json").exists():
        return load_hierarchy(path)
    hier = build_hierarchy(coords, config)
    save_hierarchy(hier, path, key)
    return hier


def _atomic_write(path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
