"""Per-segment Dice and average surface distance on the liver region.

Conventions, fixed so that every number can be re-derived by brute force:

* evaluation is restricted to voxels with ``mask == 1``;
* Dice of a class that is empty in both volumes is 1.0, and the class is
  flagged as absent and left out of the averages;
* a surface voxel is a class voxel with at least one 6-connected neighbour
  outside the class (voxels beyond the volume border count as outside);
* distances are between surface-voxel centres in millimetres;
* ASD is symmetric, ``(sum_P d(p, G) + sum_G d(g, P)) / (|S_P| + |S_G|)``,
  and undefined (``None``) if the class is empty on either side.  Directed
  means are reported next to it.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import GeometryError, LengthError
from .volume import Volume

CLASS_IDS = tuple(range(1, 9))
ROMAN = ("I", "II", "III", "IV", "V", "VI", "VII", "VIII")


def _arrays(pred, gt, mask):
    vols = [v for v in (pred, gt, mask) if isinstance(v, Volume)]
    for v in vols[1:]:
        if not v.geometry.matches(vols[0].geometry):
            raise GeometryError("prediction, ground truth and mask must share one geometry")
    arrs = [np.asarray(v.values if isinstance(v, Volume) else v) for v in (pred, gt, mask)]
    if not arrs[0].shape == arrs[1].shape == arrs[2].shape:
        raise GeometryError(f"shape mismatch: {[a.shape for a in arrs]}")
    return arrs[0], arrs[1], arrs[2] != 0


def _spacing(geometry, *vols):
    if geometry is not None:
        return np.asarray(geometry.spacing, dtype=np.float64)
    for v in vols:
        if isinstance(v, Volume):
            return np.asarray(v.geometry.spacing, dtype=np.float64)
    return np.ones(3)


def dice(pred, gt, mask, class_id):
    """``2|P∩G| / (|P|+|G|)`` inside the mask; 1.0 when both sets are empty."""
    p, g, m = _arrays(pred, gt, mask)
    ps, gs = (p == class_id) & m, (g == class_id) & m
    total = int(ps.sum()) + int(gs.sum())
    if total == 0:
        return 1.0
    return 2 * int((ps & gs).sum()) / total


def surface(region):
    """Boolean map of region voxels touching the outside through a face."""
    region = np.asarray(region, dtype=bool)
    padded = np.pad(region, 1, constant_values=False)
    inner = np.ones_like(region)
    core = (slice(1, -1),) * 3
    for axis in range(3):
        for step in (-1, 1):
            inner &= np.roll(padded, step, axis=axis)[core]
    return region & ~inner


def surface_points(region, spacing):
    """Surface-voxel centres in mm, in C order of the voxel index."""
    idx = np.argwhere(surface(region))
    return idx * np.asarray(spacing, dtype=np.float64)


def directed_distances(a, b):
    """Distance from every point of ``a`` to its nearest point of ``b``."""
    if len(a) == 0 or len(b) == 0:
        raise LengthError("surface distance needs two nonempty point sets")
    return kernels.nearest_distances(a, b)


def asd_terms(pred, gt, mask, class_id, geometry=None):
    """``(sum P->G, sum G->P, |S_P|, |S_G|)`` or None when the class is empty on a side."""
    p, g, m = _arrays(pred, gt, mask)
    return _asd_terms(p, g, m, class_id, _spacing(geometry, pred, gt, mask))


def _asd_terms(p, g, m, class_id, spacing):
    ps, gs = (p == class_id) & m, (g == class_id) & m
    if not ps.any() or not gs.any():
        return None
    sp, sg = surface_points(ps, spacing), surface_points(gs, spacing)
    d_pg = math.fsum(directed_distances(sp, sg))
    d_gp = math.fsum(directed_distances(sg, sp))
    return d_pg, d_gp, len(sp), len(sg)


def asd(pred, gt, mask, class_id, geometry=None):
    """Symmetric average surface distance in mm, or None if undefined."""
    t = asd_terms(pred, gt, mask, class_id, geometry)
    if t is None:
        return None
    d_pg, d_gp, n_p, n_g = t
    return math.fsum([d_pg, d_gp]) / (n_p + n_g)


@dataclass
class MetricsReport:
    case_id: str
    dice: list
    asd: list
    asd_pred_to_gt: list
    asd_gt_to_pred: list
    present: list  # class occurs in prediction or ground truth
    avg_dice: float | None = None
    avg_asd: float | None = None
    conventions: dict = field(default_factory=lambda: {
        "dice_both_empty": 1.0,
        "asd_undefined": None,
        "asd": "symmetric",
        "connectivity": 6,
    })

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return cls(**d)


def _mean(values):
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def evaluate_case(pred, gt, mask, geometry=None, case_id="") -> MetricsReport:
    """Dice and ASD for segments I-VIII plus averages over defined entries."""
    p, g, m = _arrays(pred, gt, mask)
    spacing = _spacing(geometry, pred, gt, mask)
    dices, asds, fwd, bwd, present = [], [], [], [], []
    for k in CLASS_IDS:
        dices.append(dice(p, g, m, k))
        present.append(bool(((p == k) & m).any() or ((g == k) & m).any()))
        t = _asd_terms(p, g, m, k, spacing)
        if t is None:
            asds.append(None), fwd.append(None), bwd.append(None)
            continue
        d_pg, d_gp, n_p, n_g = t
        asds.append(math.fsum([d_pg, d_gp]) / (n_p + n_g))
        fwd.append(d_pg / n_p)
        bwd.append(d_gp / n_g)
    avg_dice = _mean([d for d, on in zip(dices, present) if on])
    return MetricsReport(case_id, dices, asds, fwd, bwd, present, avg_dice, _mean(asds))


def write_report(report: MetricsReport, path):
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_report(path) -> MetricsReport:
    with open(path) as fh:
        return MetricsReport.from_json(json.load(fh))


def aggregate(reports):
    """Rows I..VIII and Avg with mean and std (population) over cases."""
    rows = []

    def stats(vals):
        vals = [v for v in vals if v is not None]
        if not vals:
            return None, None, 0
        mu = math.fsum(vals) / len(vals)
        sd = math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / len(vals))
        return mu, sd, len(vals)

    for j, name in enumerate(ROMAN):
        d = stats([r.dice[j] for r in reports if r.present[j]])
        a = stats([r.asd[j] for r in reports])
        rows.append({"segment": name, "dice_mean": d[0], "dice_std": d[1], "n_dice": d[2],
                     "asd_mean": a[0], "asd_std": a[1], "n_asd": a[2]})
    d = stats([r.avg_dice for r in reports])
    a = stats([r.avg_asd for r in reports])
    rows.append({"segment": "Avg", "dice_mean": d[0], "dice_std": d[1], "n_dice": d[2],
                 "asd_mean": a[0], "asd_std": a[1], "n_asd": a[2]})
    return rows


def write_table_csv(reports, path):
    rows = aggregate(reports)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return rows
