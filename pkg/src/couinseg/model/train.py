"""SGD-with-momentum training loop, checkpoints and case loading."""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, TrainingDiverged
from ..neighbors import Hierarchy, build_hierarchy, cached_hierarchy
from ..volume import PointCloud, extract_liver_points, read_raw
from .config import ModelConfig, TrainConfig
from .network import ModelParams, init_params, input_features, loss_and_grads

log = logging.getLogger(__name__)


def rng_stream(seed, name):
    """Independent generator for a named sub-stream of one global seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class Case:
    case_id: str
    points: PointCloud
    hierarchy: Hierarchy
    geometry: object = None


def load_case(case_dir, config: ModelConfig, seed=0, cache_dir=None) -> Case:
    """Read ``image/mask/label.raw`` from a case directory and build its hierarchy."""
    case_dir = Path(case_dir)
    image = read_raw(case_dir / "image.raw")
    mask = read_raw(case_dir / "mask.raw")
    label_path = case_dir / "label.raw"
    labels = read_raw(label_path) if label_path.exists() else None
    points = extract_liver_points(image, mask, labels)
    return make_case(case_dir.name, points, config, seed, cache_dir, image.geometry)


def make_case(case_id, points, config, seed=0, cache_dir=None, geometry=None) -> Case:
    hcfg = config.hierarchy_config(seed=int(rng_stream(seed, "hierarchy").integers(2**31)))
    if cache_dir is not None:
        hier = cached_hierarchy(points.coords, hcfg, cache_dir)
    else:
        hier = build_hierarchy(points.coords, hcfg)
    return Case(case_id, points, hier, geometry)


@dataclass
class TrainState:
    params: ModelParams
    momentum: dict
    epoch: int = 0
    seed: int = 0
    running_loss: float = float("nan")
    loss_curve: list = field(default_factory=list)


def sgd_momentum_step(params: ModelParams, grads, momentum, lr, mu):
    """``v <- mu v - lr g``; ``p <- p + v``."""
    for name, g in grads.items():
        v = momentum[name]
        v *= mu
        v -= lr * g
        params.values[name] += v


def train(cases, config: ModelConfig, train_config: TrainConfig, params=None, out_dir=None,
          on_epoch=None) -> TrainState:
    """Train on ``cases`` (each with labels); deterministic given ``train_config.seed``.

    Each iteration draws ``sample_fraction`` of one case's points without
    replacement and takes one SGD step on their mean cross-entropy.
    """
    seed = train_config.seed
    if params is None:
        params = init_params(config, seed=int(rng_stream(seed, "init").integers(2**31)))
    state = TrainState(params, {k: np.zeros_like(v) for k, v in params.values.items()}, 0, seed)
    sampler = rng_stream(seed, "sampler")
    feats = [input_features(c.points, config, np.float32) for c in cases]
    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        losses = []
        for ci in sampler.permutation(len(cases)):
            case = cases[ci]
            n = len(case.points)
            k = max(1, math.ceil(n * train_config.sample_fraction - 1e-9))
            sample = np.sort(sampler.choice(n, k, replace=False))
            loss, grads = loss_and_grads(feats[ci], case.points.labels, case.hierarchy, params, config, sample)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                norms = {name: float(np.linalg.norm(g)) for name, g in grads.items()}
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} on {case.case_id}",
                    {"epoch": epoch, "case": case.case_id, "loss": float(loss), "grad_norms": norms},
                )
            sgd_momentum_step(params, grads, state.momentum, train_config.lr, train_config.momentum)
            losses.append(loss)
        state.epoch = epoch + 1
        state.running_loss = float(np.mean(losses)) if losses else float("nan")
        state.loss_curve.append(state.running_loss)
        event = {"event": "epoch", "epoch": state.epoch, "loss": state.running_loss,
                 "seconds": round(time.perf_counter() - t0, 4)}
        log.info(json.dumps(event))
        if on_epoch is not None:
            on_epoch(event)
        every = train_config.checkpoint_every
        if out_dir is not None and every and state.epoch % every == 0:
            save_checkpoint(Path(out_dir) / f"checkpoint_{state.epoch:04d}", state, config, train_config)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "checkpoint_final", state, config, train_config)
    return state


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, config: ModelConfig, train_config: TrainConfig):
    """``<path>.json`` manifest plus ``<path>.bin`` little-endian float32 blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for group, tensors in (("param", state.params.values), ("momentum", state.momentum)):
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(raw)
            offset += len(raw)
    manifest = {
        "format": "couinseg-checkpoint-1",
        "model": config.to_json(),
        "train": train_config.to_json(),
        "epoch": state.epoch,
        "seed": state.seed,
        "loss_curve": state.loss_curve,
        "tensors": entries,
    }
    _atomic_write(path.with_suffix(".bin"), b"".join(blobs))
    _atomic_write(path.with_suffix(".json"), json.dumps(manifest, indent=1).encode())


def load_checkpoint(path):
    """Returns ``(TrainState, ModelConfig, TrainConfig)``."""
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != "couinseg-checkpoint-1":
        raise FormatError("not a couinseg checkpoint")
    blob = path.with_suffix(".bin").read_bytes()
    params, momentum = {}, {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        (params if e["group"] == "param" else momentum)[e["name"]] = arr.astype(np.float32)
    state = TrainState(ModelParams(params), momentum, manifest["epoch"], manifest["seed"],
                       manifest["loss_curve"][-1] if manifest["loss_curve"] else float("nan"),
                       list(manifest["loss_curve"]))
    return state, ModelConfig.from_json(manifest["model"]), TrainConfig.from_json(manifest["train"])


def _atomic_write(path, data: bytes):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
