import json
import math
from dataclasses import replace

import numpy as np
import pytest

from couinseg import phantom
from couinseg.errors import ConfigError
from couinseg.phantom import Jitter, PhantomSpec
from couinseg.volume import read_raw


def test_portal_boundary_is_superior():
    spec = PhantomSpec()
    az = spec.semi_axes[2]
    z = -az + 2 * az * spec.portal_height
    sector, superior = phantom.sector_and_side(np.array([[1.0, 0.5, z], [1.0, 0.5, z - 1e-9]]), spec)
    assert superior.tolist() == [True, False]
    assert sector.tolist() == [0, 0]


def test_vein_plane_belongs_to_next_sector():
    spec = PhantomSpec()
    a = spec.vein_azimuths[1]
    sector, _ = phantom.sector_and_side(np.array([[math.cos(a), math.sin(a), 0.0]]) * 5, spec)
    # floating-point azimuth of the point may land a hair either side of the plane
    assert sector[0] in (1, 2)
    sector, _ = phantom.sector_and_side(np.array([[5.0, 0.0, 0.0], [5.0, -1e-9, 0.0]]), spec)
    assert sector.tolist() == [0, 3]


def test_two_valued_without_noise_or_tubes():
    image, mask, _ = phantom.generate(replace(PhantomSpec(), noise_sigma=0.0, tube_radius=0.0))
    assert set(np.unique(image.values).tolist()) == {0.0, 100.0}
    assert np.array_equal(image.values == 100.0, mask.values == 1)


def test_labels_partition_mask():
    _, mask, labels = phantom.generate(PhantomSpec())
    counts = [int((labels.values == k).sum()) for k in range(1, 9)]
    assert sum(counts) == int(mask.values.sum())
    assert min(counts) > 0
    assert np.array_equal(labels.values > 0, mask.values == 1)


def test_intensity_window_and_tubes():
    image, mask, _ = phantom.generate(replace(PhantomSpec(), noise_sigma=0.0))
    inside = image.values[mask.values == 1]
    assert set(np.unique(inside).tolist()) == {100.0, 250.0}
    assert (image.values[mask.values == 0] == 0).all()


def test_generation_is_bit_exact():
    a, b = phantom.generate(PhantomSpec(seed=4)), phantom.generate(PhantomSpec(seed=4))
    assert all(x.values.tobytes() == y.values.tobytes() for x, y in zip(a, b))


@pytest.mark.parametrize("bad", [
    dict(vein_azimuths=(2.0, 1.0, 3.0)),
    dict(vein_azimuths=(0.0, 1.0, 3.0)),
    dict(portal_height=1.0),
    dict(semi_axes=(1.0, 0.0, 1.0)),
    dict(noise_sigma=-1.0),
])
def test_validation(bad):
    with pytest.raises(ConfigError):
        phantom.generate(replace(PhantomSpec(), **bad))


def test_split_sizes():
    assert phantom.split_sizes(20) == (10, 3, 7)


def test_dataset_split_and_determinism(tmp_path):
    m1 = phantom.make_dataset(20, PhantomSpec(dims=(12, 12, 10)), 5, tmp_path / "a")
    phantom.make_dataset(20, PhantomSpec(dims=(12, 12, 10)), 5, tmp_path / "b")
    splits = [c["split"] for c in m1["cases"]]
    assert (splits.count("train"), splits.count("val"), splits.count("test")) == (10, 3, 7)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) == 20 * 6 + 1
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["cases"][0]["id"] == "case_000"


def test_jitter_changes_cases(tmp_path):
    specs = phantom.jittered_specs(3, PhantomSpec(), 1)
    assert len({s.vein_azimuths for s in specs}) == 3


def test_zero_jitter_reproduces_base(tmp_path):
    base = PhantomSpec(dims=(10, 10, 8), seed=2)
    phantom.make_dataset(3, base, 9, tmp_path, Jitter.none())
    ref = phantom.generate(base)
    for i in range(3):
        for name, vol in zip(("image", "mask", "label"), ref):
            assert read_raw(tmp_path / f"case_{i:03d}" / f"{name}.raw").values.tobytes() == vol.values.tobytes()
