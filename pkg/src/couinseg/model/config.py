"""Model and training configuration.

Defaults follow the full-scale MSD settings (64^3 first grid, radius
1/(2*64), SGD with momentum 0.98 and lr 0.01, 400 epochs, 10% of points per
iteration).  ``desk()`` gives the CPU-sized variant used by the tests.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace

from ..errors import ConfigError
from ..neighbors import HierarchyConfig

N_CLASSES = 8


@dataclass(frozen=True)
class ModelConfig:
    grid_size_level1: int = 64
    radius_level1: float = 1.0 / (2 * 64)
    channels: tuple = (32, 64, 128, 256)
    enable_grid_embeddings: bool = True
    enable_graph_reasoning: bool = True
    downsample_ratio: float = 0.25
    max_neighbors: int = 100
    head: tuple = (64, N_CLASSES)
    classes: int = N_CLASSES
    input_coords: bool = True  # append normalized xyz to the intensity channel
    head_skip: bool = True  # concatenate level-1 features to the interpolated level-4 ones

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "head", tuple(int(c) for c in self.head))
        if len(self.channels) != 4:
            raise ConfigError("channels must list four per-level widths")
        if self.head[-1] != self.classes or self.classes != N_CLASSES:
            raise ConfigError("head output width must equal the 8 classes")
        if self.grid_size_level1 % 8:
            raise ConfigError("grid_size_level1 must be divisible by 8")

    @property
    def grid_path(self):
        return self.enable_grid_embeddings or self.enable_graph_reasoning

    @property
    def skip_scale(self):
        """Gain on the level-1 skip so its total energy matches the wider top level."""
        return math.sqrt(self.channels[-1] / self.channels[0])

    @property
    def input_channels(self):
        return 4 if self.input_coords else 1

    def grid_sizes(self):
        return [self.grid_size_level1 // 2**i for i in range(4)]

    def hierarchy_config(self, seed=0) -> HierarchyConfig:
        return HierarchyConfig(
            grid_size_level1=self.grid_size_level1,
            radius_level1=self.radius_level1,
            downsample_ratio=self.downsample_ratio,
            max_neighbors=self.max_neighbors,
            seed=seed,
        )

    @classmethod
    def desk(cls, **kw):
        base = dict(grid_size_level1=16, radius_level1=1.0 / (2 * 16), channels=(16, 32, 64, 128))
        base.update(kw)
        return cls(**base)

    @classmethod
    def ablation(cls, variant, **kw):
        """Ablation settings: a = point path only, b = no graph reasoning,
        c = no grid embeddings, d = full model."""
        flags = {
            "a": (False, False),
            "b": (True, False),
            "c": (False, True),
            "d": (True, True),
        }[variant]
        return cls.desk(enable_grid_embeddings=flags[0], enable_graph_reasoning=flags[1], **kw)

    def to_json(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["head"] = list(self.head)
        return d

    @classmethod
    def from_json(cls, d):
        return _from_json(cls, d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    lr: float = 0.01
    momentum: float = 0.98
    sample_fraction: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = only the final checkpoint

    def __post_init__(self):
        if self.epochs < 0 or not 0 < self.sample_fraction <= 1:
            raise ConfigError("epochs must be >= 0 and sample_fraction in (0, 1]")

    @classmethod
    def desk(cls, **kw):
        return replace(cls(epochs=30), **kw)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, d):
        return _from_json(cls, d)


def _from_json(cls, d):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def load_config_file(path):
    """``{"model": {...}, "train": {...}}`` JSON -> (ModelConfig, TrainConfig)."""
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad config JSON: {exc}") from exc
    return ModelConfig.from_json(raw.get("model", {})), TrainConfig.from_json(raw.get("train", {}))
