"""CT-like volumes, physical geometry, windowing and point extraction.

Volumes are stored as numpy arrays indexed ``values[ix, iy, iz]``.  Inputs are
expected to be axis-aligned (already reoriented); the geometry carries a full
direction matrix but no reorientation or flipping is ever applied.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, EmptyInputError, FormatError, GeometryError, LengthError

HU_MIN = -100.0
HU_MAX = 300.0

KINDS = ("intensity", "label", "mask")
_RAW_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass(frozen=True)
class VolumeGeometry:
    spacing: tuple
    direction: np.ndarray = field(default_factory=lambda: np.eye(3))
    origin: tuple = (0.0, 0.0, 0.0)
    dims: tuple = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        d = np.asarray(self.direction, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "direction", d)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise GeometryError(f"spacing must be three positive values, got {self.spacing}")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise GeometryError(f"dims must be three values >= 1, got {self.dims}")
        if not np.allclose(d.T @ d, np.eye(3), atol=1e-6):
            raise GeometryError("direction columns must be orthonormal")

    def affine(self):
        """4x4 voxel-index to millimetre matrix."""
        a = np.eye(4)
        a[:3, :3] = self.direction * np.asarray(self.spacing)[None, :]
        a[:3, 3] = self.origin
        return a

    def matches(self, other: "VolumeGeometry", atol=1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.origin, other.origin, atol=atol)
            and np.allclose(self.direction, other.direction, atol=atol)
        )

    def to_json(self):
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "direction": [float(x) for x in self.direction.reshape(-1)],
            "origin": list(self.origin),
        }

    @classmethod
    def from_json(cls, meta):
        return cls(
            spacing=meta["spacing"],
            direction=np.asarray(meta["direction"], dtype=np.float64).reshape(3, 3),
            origin=meta["origin"],
            dims=meta["dims"],
        )


@dataclass
class Volume:
    geometry: VolumeGeometry
    values: np.ndarray
    kind: str = "intensity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown volume kind {self.kind!r}")
        values = np.asarray(self.values)
        if values.size != int(np.prod(self.geometry.dims)):
            raise GeometryError(
                f"value count {values.size} does not match dims {self.geometry.dims}"
            )
        values = values.reshape(self.geometry.dims)
        if self.kind == "mask" and not np.isin(values, (0, 1)).all():
            raise DomainError("mask values must be 0 or 1")
        if self.kind == "label" and ((values < 0) | (values > 8)).any():
            raise DomainError("label values must lie in 0..8")
        self.values = values


@dataclass
class PointCloud:
    """Points with coordinates normalized to the unit cube.

    ``labels`` holds class ids 0..7 (Couinaud segment I -> 0, VIII -> 7).
    """

    coords: np.ndarray
    feats: np.ndarray
    labels: np.ndarray | None = None
    source_voxels: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        feats = np.asarray(self.feats)
        self.feats = feats.reshape(len(feats), -1)
        if len(self.feats) != len(self.coords):
            raise DomainError("feats and coords row counts differ")
        if len(self.coords) and (self.coords.min() < 0 or self.coords.max() > 1):
            raise DomainError("point coordinates must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.coords):
                raise DomainError("labels length differs from point count")

    def __len__(self):
        return len(self.coords)

    def subset(self, idx):
        return PointCloud(
            self.coords[idx],
            self.feats[idx],
            None if self.labels is None else self.labels[idx],
            None if self.source_voxels is None else self.source_voxels[idx],
        )


def window_hu(volume: Volume) -> Volume:
    """Clamp to [-100, 300] HU and map linearly onto [0, 1]."""
    if volume.kind != "intensity":
        raise DomainError(f"windowing needs an intensity volume, got {volume.kind!r}")
    v = np.clip(volume.values.astype(np.float64), HU_MIN, HU_MAX)
    out = (v - HU_MIN) / (HU_MAX - HU_MIN)
    return Volume(volume.geometry, out, "intensity")


def voxel_to_physical(geometry: VolumeGeometry, v) -> np.ndarray:
    """Millimetre position ``d (s * v) + o`` of voxel index ``v`` (or an (N, 3) array)."""
    v = np.asarray(v, dtype=np.float64)
    dims = np.asarray(geometry.dims)
    if ((v < 0) | (v > dims - 1)).any():
        raise DomainError(f"voxel index {v.tolist()} outside dims {geometry.dims}")
    scaled = v * np.asarray(geometry.spacing)
    return scaled @ geometry.direction.T + np.asarray(geometry.origin)


def normalize_min_max(points: np.ndarray) -> np.ndarray:
    """Per-axis min-max scaling to [0, 1]; a zero-extent axis maps to 0."""
    lo = points.min(axis=0)
    extent = points.max(axis=0) - lo
    safe = np.where(extent > 0, extent, 1.0)
    out = np.where(extent > 0, (points - lo) / safe, 0.0)
    return np.clip(out, 0.0, 1.0)


def extract_liver_points(intensity: Volume, mask: Volume, labels: Volume | None = None) -> PointCloud:
    """One point per masked voxel, in x-fastest voxel order."""
    if mask.kind != "mask":
        raise DomainError("mask volume must have kind 'mask'")
    for other in (mask, labels):
        if other is not None and not intensity.geometry.matches(other.geometry):
            raise GeometryError("intensity, mask and labels must share geometry")
    # x-fastest traversal, matching the raw payload order
    vox = np.argwhere(mask.values.transpose(2, 1, 0) == 1)[:, ::-1]
    if len(vox) == 0:
        raise EmptyInputError("mask selects no voxels")
    phys = voxel_to_physical(intensity.geometry, vox)
    coords = normalize_min_max(phys)
    windowed = window_hu(intensity).values
    feats = windowed[vox[:, 0], vox[:, 1], vox[:, 2]].astype(np.float32)[:, None]
    point_labels = None
    if labels is not None:
        lab = labels.values[vox[:, 0], vox[:, 1], vox[:, 2]].astype(np.int64)
        if (lab < 1).any():
            raise DomainError("masked voxels must carry a segment label in 1..8")
        point_labels = lab - 1
    return PointCloud(coords, feats, point_labels, vox.astype(np.int64))


# -- raw + JSON interchange ---------------------------------------------------


def _meta_path(path, meta_path):
    return Path(meta_path) if meta_path is not None else Path(path).with_suffix(".json")


def write_raw(volume: Volume, path, meta_path=None):
    dtype_name = "f32" if volume.kind == "intensity" else "u8"
    meta = volume.geometry.to_json()
    meta.update(kind=volume.kind, dtype=dtype_name)
    payload = np.asarray(volume.values).astype(_RAW_DTYPES[dtype_name])
    Path(path).write_bytes(payload.tobytes(order="F"))
    _meta_path(path, meta_path).write_text(json.dumps(meta, indent=1))


def read_raw(path, meta_path=None) -> Volume:
    try:
        meta = json.loads(_meta_path(path, meta_path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad metadata JSON: {exc}") from exc
    dtype = _RAW_DTYPES.get(meta.get("dtype"))
    if dtype is None:
        raise FormatError(f"unsupported raw dtype {meta.get('dtype')!r}")
    geometry = VolumeGeometry.from_json(meta)
    data = Path(path).read_bytes()
    expected = int(np.prod(geometry.dims)) * dtype.itemsize
    if len(data) != expected:
        raise LengthError(f"payload has {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype=dtype).reshape(geometry.dims, order="F")
    if dtype == np.dtype("<f4"):
        values = values.astype(np.float32)
    return Volume(geometry, values.copy(), meta.get("kind", "intensity"))


# -- minimal NIfTI-1 reader -------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


def read_nifti_minimal(path, kind="intensity") -> Volume:
    """Uncompressed single-file NIfTI-1 (``n+1``) with uint8/int16/float32 data."""
    data = Path(path).read_bytes()
    if len(data) < 348:
        raise LengthError("file shorter than a NIfTI-1 header")
    if struct.unpack("<i", data[:4])[0] == 348:
        end = "<"
    elif struct.unpack(">i", data[:4])[0] == 348:
        end = ">"
    else:
        raise FormatError("sizeof_hdr is not 348")
    if data[344:348] != b"n+1\x00":
        raise FormatError(f"bad NIfTI magic {data[344:348]!r}")
    dim = struct.unpack(end + "8h", data[40:56])
    if not 1 <= dim[0] <= 7 or any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise FormatError(f"only 3D volumes are supported, dim={dim}")
    dims = tuple(max(d, 1) for d in dim[1:4])
    datatype = struct.unpack(end + "h", data[70:72])[0]
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack(end + "8f", data[76:108])
    vox_offset = int(struct.unpack(end + "f", data[108:112])[0])
    slope, inter = struct.unpack(end + "2f", data[112:120])
    sform_code = struct.unpack(end + "h", data[254:256])[0]
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(end)
    count = int(np.prod(dims))
    payload = data[vox_offset : vox_offset + count * dtype.itemsize]
    if vox_offset < 348 or len(payload) != count * dtype.itemsize:
        raise LengthError("NIfTI payload is truncated")
    values = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    if kind == "intensity":
        values = values.astype(np.float32)
        if slope not in (0.0, 1.0) or inter != 0.0:
            values = values * (slope or 1.0) + inter
    else:
        values = values.astype(np.uint8)

    if sform_code > 0:
        srow = np.array(struct.unpack(end + "12f", data[280:328]), dtype=np.float64).reshape(3, 4)
        linear = srow[:, :3]
        spacing = np.linalg.norm(linear, axis=0)
        direction = linear / spacing
        origin = srow[:, 3]
    else:
        spacing = np.abs(np.array(pixdim[1:4], dtype=np.float64))
        spacing[spacing == 0] = 1.0
        direction = np.eye(3)
        origin = np.zeros(3)
    geometry = VolumeGeometry(spacing, direction, origin, dims)
    return Volume(geometry, values, kind)


# -- point cloud files ----------------------------------------------------------

_POINT_ARRAYS = (("coords", "<f8"), ("feats", "<f4"), ("labels", "<i8"), ("source_voxels", "<i8"))


def save_points(points: PointCloud, directory, geometry: VolumeGeometry | None = None):
    """``points.json`` manifest plus little-endian ``points.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, dt in _POINT_ARRAYS:
        arr = getattr(points, name)
        if arr is None:
            continue
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"n_points": len(points), "arrays": entries,
                "geometry": None if geometry is None else geometry.to_json()}
    (directory / "points.bin").write_bytes(b"".join(blobs))
    (directory / "points.json").write_text(json.dumps(manifest, indent=1))


def load_points(directory):
    """Returns ``(PointCloud, VolumeGeometry | None)``."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "points.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad points manifest: {exc}") from exc
    blob = (directory / "points.bin").read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"]))
        if e["offset"] + n * dt.itemsize > len(blob):
            raise LengthError(f"points.bin too short for {e['name']}")
        arrays[e["name"]] = np.frombuffer(blob, dtype=dt, count=n, offset=e["offset"]).reshape(e["shape"]).copy()
    geo = manifest.get("geometry")
    return PointCloud(**arrays), (VolumeGeometry.from_json(geo) if geo else None)
