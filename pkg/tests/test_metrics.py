import csv
import math

import numpy as np
import pytest

from couinseg import metrics
from couinseg.errors import GeometryError
from couinseg.volume import Volume, VolumeGeometry


def geom(dims, spacing=(1.0, 1.0, 1.0)):
    return VolumeGeometry(spacing, np.eye(3), (0, 0, 0), dims)


def dice_oracle(p, g, m, k):
    a = b = both = 0
    for idx in np.ndindex(p.shape):
        if not m[idx]:
            continue
        a += p[idx] == k
        b += g[idx] == k
        both += p[idx] == k and g[idx] == k
    return 1.0 if a + b == 0 else 2 * both / (a + b)


def surface_oracle(region):
    pts = []
    for idx in np.ndindex(region.shape):
        if not region[idx]:
            continue
        for axis in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[axis] += step
                if not 0 <= n[axis] < region.shape[axis] or not region[tuple(n)]:
                    pts.append(idx)
                    break
            else:
                continue
            break
    return pts


def asd_oracle(p, g, m, k, spacing):
    ps, gs = (p == k) & m, (g == k) & m
    if not ps.any() or not gs.any():
        return None
    sp = [tuple(i * s for i, s in zip(v, spacing)) for v in surface_oracle(ps)]
    sg = [tuple(i * s for i, s in zip(v, spacing)) for v in surface_oracle(gs)]

    def dist(a, b):
        dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
        return math.sqrt(dx * dx + dy * dy + dz * dz)

    fwd = math.fsum(min(dist(a, b) for b in sg) for a in sp)
    bwd = math.fsum(min(dist(b, a) for a in sp) for b in sg)
    return math.fsum([fwd, bwd]) / (len(sp) + len(sg))


def single(dims, *voxels, value=1):
    v = np.zeros(dims, np.uint8)
    for x in voxels:
        v[x] = value
    return v


def test_dice_examples():
    m = np.ones((4, 4, 4), bool)
    g = single((4, 4, 4), (0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3))
    p = single((4, 4, 4), (0, 0, 0), (0, 0, 1), (0, 0, 2), (1, 1, 1))
    assert metrics.dice(p, g, m, 1) == 0.75
    assert metrics.dice(g, g, m, 1) == 1.0
    assert metrics.dice(single((4, 4, 4), (3, 3, 3)), g, m, 1) == 0.0
    assert metrics.dice(g, g, m, 5) == 1.0


def test_mask_restricts_evaluation():
    g = single((2, 2, 2), (0, 0, 0), (1, 1, 1))
    p = single((2, 2, 2), (0, 0, 0))
    m = single((2, 2, 2), (0, 0, 0))
    assert metrics.dice(p, g, m, 1) == 1.0


def test_asd_examples():
    m = np.ones((3, 3, 3), bool)
    a, b = single((3, 3, 3), (1, 1, 1)), single((3, 3, 3), (1, 1, 2))
    assert metrics.asd(a, a, m, 1) == 0.0
    assert metrics.asd(a, b, m, 1) == 1.0
    assert metrics.asd(a, b, m, 1, geom((3, 3, 3), (1.0, 1.0, 5.0))) == 5.0
    assert metrics.asd(a, b, m, 2) is None
    assert metrics.asd(a, np.zeros_like(a), m, 1) is None


def test_surface_counts_volume_border_as_outside():
    full = np.ones((3, 3, 3), bool)
    surf = metrics.surface(full)
    assert surf.sum() == 26 and not surf[1, 1, 1]
    assert metrics.surface(np.ones((1, 1, 1), bool)).all()


@pytest.mark.parametrize("seed", range(20))
def test_matches_brute_force(seed, backend):
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in rng.integers(3, 17, 3))
    spacing = tuple(float(s) for s in rng.uniform(0.5, 3.0, 3))
    gt = rng.integers(0, 9, shape).astype(np.uint8)
    pred = np.where(rng.random(shape) < 0.3, rng.integers(0, 9, shape), gt).astype(np.uint8)
    mask = rng.random(shape) < 0.85
    rep = metrics.evaluate_case(pred, gt, mask, geom(shape, spacing))
    for j, k in enumerate(metrics.CLASS_IDS):
        assert rep.dice[j] == dice_oracle(pred, gt, mask, k)
        assert rep.asd[j] == asd_oracle(pred, gt, mask, k, spacing)


def test_matches_brute_force_16_cubed(backend):
    rng = np.random.default_rng(16)
    shape = (16, 16, 16)
    gt = np.zeros(shape, np.uint8)
    gt[2:12, 3:14, 1:15] = 3
    gt[8:16, 0:6, 4:10] = 7
    pred = np.roll(gt, 1, axis=2)
    pred[rng.random(shape) < 0.02] = 3
    mask = np.ones(shape, bool)
    spacing = (0.8, 0.8, 2.5)
    for k in (3, 7):
        assert metrics.asd(pred, gt, mask, k, geom(shape, spacing)) == asd_oracle(pred, gt, mask, k, spacing)
        assert metrics.dice(pred, gt, mask, k) == dice_oracle(pred, gt, mask, k)


def test_symmetry_and_spacing_scaling(rng):
    shape = (8, 9, 7)
    gt = rng.integers(0, 3, shape).astype(np.uint8)
    pred = rng.integers(0, 3, shape).astype(np.uint8)
    m = np.ones(shape, bool)
    for k in (1, 2):
        assert metrics.dice(pred, gt, m, k) == metrics.dice(gt, pred, m, k)
        assert metrics.asd(pred, gt, m, k) == metrics.asd(gt, pred, m, k)
        base = metrics.asd(pred, gt, m, k, geom(shape, (1.0, 1.0, 1.0)))
        scaled = metrics.asd(pred, gt, m, k, geom(shape, (2.0, 2.0, 2.0)))
        assert math.isclose(scaled, 2 * base, rel_tol=1e-12)


def test_absent_classes_are_flagged_and_excluded():
    g = single((4, 4, 4), (0, 0, 0), (1, 0, 0))
    g[3, 3, 3] = 2
    rep = metrics.evaluate_case(g, g, np.ones((4, 4, 4), bool))
    assert rep.present == [True, True] + [False] * 6
    assert rep.dice == [1.0] * 8 and rep.asd[:2] == [0.0, 0.0] and rep.asd[2:] == [None] * 6
    assert rep.avg_dice == 1.0 and rep.avg_asd == 0.0
    p = g.copy()
    p[3, 3, 3] = 0
    rep = metrics.evaluate_case(p, g, np.ones((4, 4, 4), bool))
    assert rep.dice[1] == 0.0 and rep.asd[1] is None and rep.avg_dice == 0.5


def test_geometry_mismatch():
    a = Volume(geom((2, 2, 2)), np.zeros((2, 2, 2), np.uint8), "label")
    b = Volume(geom((2, 2, 2), (1.0, 1.0, 2.0)), np.zeros((2, 2, 2), np.uint8), "label")
    with pytest.raises(GeometryError):
        metrics.evaluate_case(a, b, np.ones((2, 2, 2), bool))
    with pytest.raises(GeometryError):
        metrics.dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), np.ones((2, 2, 2)), 1)


def test_report_roundtrip_and_table(tmp_path):
    rng = np.random.default_rng(0)
    reps = []
    for i in range(3):
        gt = rng.integers(0, 9, (6, 6, 6)).astype(np.uint8)
        pred = np.where(rng.random((6, 6, 6)) < 0.2, 0, gt).astype(np.uint8)
        reps.append(metrics.evaluate_case(pred, gt, np.ones((6, 6, 6), bool), case_id=f"c{i}"))
    metrics.write_report(reps[0], tmp_path / "c0.json")
    assert metrics.read_report(tmp_path / "c0.json") == reps[0]
    rows = metrics.write_table_csv(reps, tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        table = list(csv.DictReader(fh))
    assert [r["segment"] for r in table] == list(metrics.ROMAN) + ["Avg"]
    vals = [r.avg_dice for r in reps]
    assert float(table[-1]["dice_mean"]) == rows[-1]["dice_mean"] == math.fsum(vals) / 3
