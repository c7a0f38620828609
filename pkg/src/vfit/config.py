"""Model/training configuration and JSON config handling."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

PRESET_CHANNELS = {
    "B": (32, (64, 128, 256, 512)),
    "S": (16, (32, 64, 128, 256)),
    "tiny": (16, (16, 32, 64, 128)),
}


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


@dataclass
class ModelConfig:
    variant: str = "B"
    frames: int = 4
    embed_channels: int | None = None
    stage_channels: tuple[int, ...] | None = None
    stage_blocks: tuple[int, ...] = (2, 2, 6, 2)
    window: int = 8
    block_kind: str = "sepsts"
    kernel_points: int = 25
    patch_size: int = 4
    mlp_ratio: int = 4
    rel_bias: bool = True
    temporal_first: bool = False
    single_scale: bool = False

    def __post_init__(self):
        if self.variant not in PRESET_CHANNELS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        c0, chans = PRESET_CHANNELS[self.variant]
        if self.embed_channels is None:
            self.embed_channels = c0
        self.stage_channels = tuple(self.stage_channels or chans)
        self.stage_blocks = tuple(self.stage_blocks)
        if len(self.stage_blocks) != 4 or len(self.stage_channels) != 4:
            raise ConfigError("stage_blocks and stage_channels need exactly 4 entries")
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        if self.kernel_points < 1:
            raise ConfigError("kernel_points must be >= 1")
        if self.block_kind not in ("sepsts", "sts", "global", "conv3d"):
            raise ConfigError(f"unknown block_kind {self.block_kind!r}")
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")


@dataclass
class TrainConfig:
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4
    epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    crop: int = 256
    augment: bool = True
    checkpoint_every: int = 1000
    deep_supervision: bool = False
    dtype: str = "float32"
    threads: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError("need 0 < lr_end <= lr_start")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")


@dataclass
class DataConfig:
    manifest: str | None = None
    synthetic: dict[str, Any] | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    # "command" is written into run snapshots and ignored on load
    unknown = set(d) - {"model", "train", "data", "checkpoint", "command"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    ckpt = d.get("checkpoint")
    if ckpt is not None and not isinstance(ckpt, str):
        raise ConfigError("checkpoint must be a path string")
    return RunConfig(
        model=_build(ModelConfig, d.get("model", {}), "model"),
        train=_build(TrainConfig, d.get("train", {}), "train"),
        data=_build(DataConfig, d.get("data", {}), "data"),
        checkpoint=ckpt,
    )


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override into non-object at {key!r}")
        node[parts[-1]] = value
    return d


def load(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    return from_dict(apply_overrides(d, list(overrides)))
