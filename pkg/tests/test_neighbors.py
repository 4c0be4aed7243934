import itertools
import math

import numpy as np
import pytest

from couinseg.errors import ConfigError, DomainError, EmptyInputError
from couinseg.neighbors import (
    HierarchyConfig,
    ball_query,
    build_hierarchy,
    cached_hierarchy,
    downsample,
    idw_weights,
    load_hierarchy,
    save_hierarchy,
)

from .test_kernels import as_lists, ball_oracle


def test_single_point_is_its_own_neighbour(backend):
    p = np.array([[0.3, 0.4, 0.5]])
    for r in (1e-9, 0.5, 10.0):
        ptr, idx, fb = ball_query(p, p, r, 4)
        assert as_lists(ptr, idx) == [[0]] and not fb.any()


def test_five_points_match_oracle(backend, rng):
    pts = rng.random((5, 3))
    ptr, idx, fb = ball_query(pts, pts, 0.3, 3)
    assert (as_lists(ptr, idx), list(fb)) == ball_oracle(pts, pts, 0.3, 3)


def test_k1_is_exact_nearest(backend, rng):
    src, qry = rng.random((50, 3)), rng.random((30, 3))
    ptr, idx, _ = ball_query(qry, src, 2.0, 1)
    brute = [int(np.argmin(((src - q) ** 2).sum(1))) for q in qry]
    assert idx.tolist() == brute and np.diff(ptr).tolist() == [1] * 30


def test_ball_query_errors():
    with pytest.raises(EmptyInputError):
        ball_query(np.zeros((1, 3)), np.zeros((0, 3)), 0.1, 3)
    with pytest.raises(DomainError):
        ball_query(np.zeros((1, 3)), np.zeros((1, 3)), 0.0, 3)


def test_ball_query_source_permutation(backend, rng):
    src = rng.random((120, 3))
    qry = rng.random((20, 3))
    perm = rng.permutation(120)
    a = as_lists(*ball_query(qry, src, 0.2, 7)[:2])
    b = as_lists(*ball_query(qry, src[perm], 0.2, 7)[:2])
    # continuous coordinates: no distance ties, so the sets map through the permutation
    assert [[int(perm[j]) for j in row] for row in b] == a


def test_downsample_identity():
    assert downsample(np.random.default_rng(0).random((9, 3)), 1.0, 3).tolist() == list(range(9))


@pytest.mark.parametrize("seed", range(4))
def test_downsample_square_corners_give_diagonal(backend, seed):
    sq = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], float)
    a, b = downsample(sq, 0.5, seed)
    assert np.isclose(np.linalg.norm(sq[a] - sq[b]), math.sqrt(2))


def min_pairwise(p):
    return min(np.linalg.norm(a - b) for a, b in itertools.combinations(p, 2))


def test_downsample_beats_random_subsets(backend):
    rng = np.random.default_rng(11)
    pts = rng.random((100, 3))
    sel = downsample(pts, 0.25, 5)
    assert len(sel) == 25 and len(set(sel.tolist())) == 25
    best_random = max(min_pairwise(pts[rng.choice(100, 25, replace=False)]) for _ in range(1000))
    assert min_pairwise(pts[sel]) >= best_random


def test_downsample_errors_and_size():
    with pytest.raises(EmptyInputError):
        downsample(np.zeros((0, 3)), 0.5, 0)
    with pytest.raises(DomainError):
        downsample(np.zeros((3, 3)), 0.0, 0)
    assert len(downsample(np.random.default_rng(0).random((10, 3)), 0.25, 0)) == 3


def grid_points(n):
    ax = np.arange(n) / (n - 1)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)


def test_level_sizes_forced_by_ratio(backend):
    h = build_hierarchy(grid_points(4), HierarchyConfig.for_grid(16))
    assert [len(lv) for lv in h.levels] == [64, 16, 4, 1]


def test_default_first_radius():
    cfg = HierarchyConfig()
    assert cfg.grid_size_level1 == 64 and cfg.radius_level1 == 1 / (2 * 64)
    assert cfg.radii() == [1 / 128, 1 / 64, 1 / 32, 1 / 16]
    assert cfg.grid_sizes() == [64, 32, 16, 8]
    assert cfg.max_neighbors <= 100


def test_config_validation():
    with pytest.raises(ConfigError):
        HierarchyConfig(grid_size_level1=12)
    with pytest.raises(ConfigError):
        HierarchyConfig(downsample_ratio=1.5)


def test_every_level_rechecked_by_brute_force(backend, rng):
    pts = rng.random((300, 3))
    cfg = HierarchyConfig(grid_size_level1=8, radius_level1=0.06, max_neighbors=12, seed=3)
    h = build_hierarchy(pts, cfg)
    source = pts
    for i, lv in enumerate(h.levels):
        ref, flags = ball_oracle(lv.coords, source, h.radii[i], 12)
        assert as_lists(lv.nbr_ptr, lv.nbr_idx) == ref
        assert lv.fallback.tolist() == flags
        assert np.array_equal(lv.coords, source[lv.parent_indices])
        counts = lv.counts()
        assert counts.min() >= 1 and counts.max() <= 12
        d = np.linalg.norm(h.displacements(i), axis=1)
        inside = ~np.repeat(lv.fallback, counts)
        assert (d[inside] <= h.radii[i]).all()
        source = lv.coords
    assert h.radii == [0.06 * 2**i for i in range(4)]
    assert [len(lv) for lv in h.levels] == [300, 75, 19, 5]


def test_padded_table_repeats_first_entry():
    h = build_hierarchy(np.random.default_rng(1).random((40, 3)), HierarchyConfig(grid_size_level1=8, radius_level1=0.2))
    lv = h.levels[0]
    tab = lv.padded()
    for j in range(len(lv)):
        row = lv.neighbor_list(j)
        assert tab[j, : len(row)].tolist() == row.tolist()
        assert (tab[j, len(row):] == row[0]).all()


def test_hierarchy_is_deterministic(rng):
    pts = rng.random((200, 3))
    cfg = HierarchyConfig(grid_size_level1=8, radius_level1=0.05, seed=9)
    a, b = build_hierarchy(pts, cfg), build_hierarchy(pts, cfg)
    for la, lb in zip(a.levels, b.levels):
        assert np.array_equal(la.parent_indices, lb.parent_indices)
        assert np.array_equal(la.nbr_idx, lb.nbr_idx)


def test_too_few_points():
    with pytest.raises(DomainError):
        build_hierarchy(np.zeros((3, 3)), HierarchyConfig())


def test_idw_weights(rng):
    src, tgt = rng.random((10, 3)), rng.random((25, 3))
    idx, w = idw_weights(src, tgt, 3)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-12)
    assert (w > 0).all()
    for t, row in zip(tgt, idx):
        assert row.tolist() == np.argsort(((src - t) ** 2).sum(1), kind="stable")[:3].tolist()
    # a target sitting on a source point takes (almost) all of its weight
    _, w = idw_weights(src, src[:1], 3)
    assert w[0, 0] > 0.999


def test_cache_roundtrip(tmp_path, rng):
    pts = rng.random((150, 3))
    cfg = HierarchyConfig(grid_size_level1=8, radius_level1=0.05)
    h = build_hierarchy(pts, cfg)
    save_hierarchy(h, tmp_path / "h")
    back = load_hierarchy(tmp_path / "h")
    assert back.radii == h.radii and back.grid_sizes == h.grid_sizes
    for la, lb in zip(h.levels, back.levels):
        for name in ("parent_indices", "coords", "nbr_ptr", "nbr_idx", "fallback"):
            assert np.array_equal(getattr(la, name), getattr(lb, name))
    assert np.array_equal(back.interp_w, h.interp_w)
    first = cached_hierarchy(pts, cfg, tmp_path / "cache")
    (entry,) = list((tmp_path / "cache").iterdir())
    again = cached_hierarchy(pts, cfg, tmp_path / "cache")
    assert np.array_equal(first.levels[2].nbr_idx, again.levels[2].nbr_idx)
    assert len(list((tmp_path / "cache").iterdir())) == 1 and entry.exists()
