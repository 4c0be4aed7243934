"""Synthetic liver phantoms with eight Couinaud-style labelled segments.

The liver is an ellipsoid.  Around its vertical axis, four azimuthal sectors
are bounded by the reference half-plane at azimuth 0 (+x) and the three
hepatic-vein half-planes; a horizontal portal plane splits each sector into
a superior and an inferior segment.  Voxels exactly on a boundary belong to
the sector/side on the ``>=`` side.  Sector and side map onto segment ids via
``SEGMENT_TABLE``, a topological stand-in for the real anatomy:

    sector 0 (right posterior):  inferior VI,  superior VII
    sector 1 (right anterior):   inferior V,   superior VIII
    sector 2 (left medial):      inferior I,   superior IV
    sector 3 (left lateral):     inferior III, superior II

Intensity is 0 HU outside the liver, 100 HU parenchyma, 250 HU inside the
vessel tubes (one vertical tube inside each vein half-plane, one horizontal
tube in the portal plane), plus Gaussian noise.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .volume import Volume, VolumeGeometry, write_raw

SEGMENT_TABLE = np.array([[6, 7], [5, 8], [1, 4], [3, 2]], dtype=np.uint8)

BACKGROUND_HU = 0.0
PARENCHYMA_HU = 100.0
VESSEL_HU = 250.0

SPLIT_RATIO = (10, 3, 7)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (32, 32, 24)
    spacing: tuple = (1.0, 1.0, 1.5)
    semi_axes: tuple = (14.0, 12.5, 15.0)  # mm
    vein_azimuths: tuple = (1.3, 2.9, 4.5)  # radians, right / middle / left hepatic
    portal_height: float = 0.55  # fraction of the liver's vertical extent
    tube_radius: float = 1.5  # mm
    noise_sigma: float = 10.0  # HU
    seed: int = 0

    def validate(self):
        a = self.vein_azimuths
        if len(a) != 3 or not (0 < a[0] < a[1] < a[2] < 2 * math.pi):
            raise ConfigError("vein azimuths must be strictly increasing inside (0, 2*pi)")
        if not 0 < self.portal_height < 1:
            raise ConfigError("portal height must lie in (0, 1)")
        if len(self.semi_axes) != 3 or min(self.semi_axes) <= 0:
            raise ConfigError("semi-axes must be positive")
        if len(self.dims) != 3 or min(self.dims) < 1 or min(self.spacing) <= 0:
            raise ConfigError("dims must be >= 1 and spacing positive")
        if self.tube_radius < 0 or self.noise_sigma < 0:
            raise ConfigError("tube radius and noise sigma must be non-negative")
        return self

    def to_json(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Jitter:
    """Uniform per-case perturbation half-widths."""

    azimuth: float = 0.1  # radians, each vein independently
    portal_height: float = 0.03
    semi_axes: float = 0.08  # relative

    @classmethod
    def none(cls):
        return cls(0.0, 0.0, 0.0)


def _positions(spec):
    spacing = np.asarray(spec.spacing)
    idx = np.stack(np.meshgrid(*(np.arange(d) for d in spec.dims), indexing="ij"), -1)
    center = (np.asarray(spec.dims) - 1) * spacing / 2
    return idx * spacing - center


def sector_and_side(d, spec):
    """Azimuth sector 0..3 and superior flag for liver-centred mm offsets ``d``."""
    theta = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2 * math.pi)
    sector = np.searchsorted(np.asarray(spec.vein_azimuths), theta, side="right")
    az = spec.semi_axes[2]
    height = (d[..., 2] + az) / (2 * az)
    return sector, height >= spec.portal_height


def generate(spec: PhantomSpec):
    """Returns ``(intensity, mask, labels)`` volumes for ``spec``."""
    spec.validate()
    d = _positions(spec)
    axes = np.asarray(spec.semi_axes)
    mask = ((d / axes) ** 2).sum(-1) <= 1.0
    sector, superior = sector_and_side(d, spec)
    labels = np.where(mask, SEGMENT_TABLE[sector, superior.astype(np.int64)], 0).astype(np.uint8)

    vessel = np.zeros(spec.dims, dtype=bool)
    if spec.tube_radius > 0:
        ax, ay, az = axes
        for a in spec.vein_azimuths:
            e = np.array([math.cos(a), math.sin(a)])
            rho = 0.5 / math.sqrt((e[0] / ax) ** 2 + (e[1] / ay) ** 2)
            dist = np.hypot(d[..., 0] - rho * e[0], d[..., 1] - rho * e[1])
            vessel |= dist < spec.tube_radius
        z_portal = -az + 2 * az * spec.portal_height
        vessel |= np.hypot(d[..., 1], d[..., 2] - z_portal) < spec.tube_radius

    hu = np.full(spec.dims, BACKGROUND_HU)
    hu[mask] = PARENCHYMA_HU
    hu[mask & vessel] = VESSEL_HU
    if spec.noise_sigma > 0:
        hu = hu + np.random.default_rng(spec.seed).normal(0.0, spec.noise_sigma, spec.dims)

    geometry = VolumeGeometry(spec.spacing, np.eye(3), (0.0, 0.0, 0.0), spec.dims)
    return (
        Volume(geometry, hu.astype(np.float32), "intensity"),
        Volume(geometry, mask.astype(np.uint8), "mask"),
        Volume(geometry, labels, "label"),
    )


def split_sizes(n, ratio=SPLIT_RATIO):
    total = sum(ratio)
    n_train = round(n * ratio[0] / total)
    n_val = round(n * ratio[1] / total)
    return n_train, n_val, n - n_train - n_val


def jittered_specs(n_cases, base: PhantomSpec, seed, jitter: Jitter = Jitter()):
    rng = np.random.default_rng(seed)
    specs = []
    for _ in range(n_cases):
        u_az = rng.uniform(-1, 1, 3)
        u_h = rng.uniform(-1, 1)
        u_ax = rng.uniform(-1, 1, 3)
        case_seed = int(rng.integers(2**31))
        az = tuple(float(a) for a in np.sort(np.asarray(base.vein_azimuths) + jitter.azimuth * u_az))
        specs.append(
            replace(
                base,
                vein_azimuths=az,
                portal_height=float(base.portal_height + jitter.portal_height * u_h),
                semi_axes=tuple(float(a) for a in np.asarray(base.semi_axes) * (1 + jitter.semi_axes * u_ax)),
                seed=base.seed if jitter == Jitter.none() else case_seed,
            ).validate()
        )
    return specs


def make_dataset(n_cases, base_spec: PhantomSpec, seed, out_dir, jitter: Jitter = Jitter()):
    """Write ``n_cases`` jittered phantoms plus a ``manifest.json`` with splits."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = jittered_specs(n_cases, base_spec, seed, jitter)
    n_train, n_val, _ = split_sizes(n_cases)
    cases = []
    for i, spec in enumerate(specs):
        case_id = f"case_{i:03d}"
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        case_dir = out_dir / case_id
        case_dir.mkdir(exist_ok=True)
        image, mask, labels = generate(spec)
        write_raw(image, case_dir / "image.raw")
        write_raw(mask, case_dir / "mask.raw")
        write_raw(labels, case_dir / "label.raw")
        cases.append({"id": case_id, "split": split, "spec": spec.to_json()})
    manifest = {
        "seed": seed,
        "split_ratio": list(SPLIT_RATIO),
        "jitter": asdict(jitter),
        "cases": cases,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
