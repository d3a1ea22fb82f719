"""Run configuration: one JSON document, validated against dataclass schemas."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig, TrainConfig
from .sampler import SamplerConfig
from .scenegen import DepthCamera, SceneParams


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_scenes: int = 12
    test_scenes: tuple = (0, 1)
    poses_per_scene: int = 50
    step_length: float = 0.3
    cloud_cap: int = 1024
    scene: SceneParams = field(default_factory=SceneParams)
    camera: DepthCamera = field(default_factory=DepthCamera)


@dataclass
class TrainSection:
    optim: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_size=16, epochs=30, lr_max=2e-3, warmup_steps=100, total_steps=None))
    diffusion_steps: int = 1000
    checkpoint_every: int = 5


@dataclass
class ExploreConfig:
    scenes: tuple | None = None  # defaults to the test scenes
    step_length: float = 0.1  # finer than the dataset cadence; gives ~100 poses per scene
    final_spin: int = 8
    max_poses: int | None = None


@dataclass
class EvalConfig:
    embedder_seed: int = 0
    embed_dim: int = 64


@dataclass
class AblateConfig:
    scene: int | None = None  # defaults to the first explored scene
    steps: tuple = (5, 10, 30, 100)
    guidance: tuple = (0.0, 1.0, 3.0, 10.0)
    pose_stride: int = 2


@dataclass
class RunConfig:
    seed: int = 0
    workdir: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    explore: ExploreConfig = field(default_factory=ExploreConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    @property
    def root(self) -> Path:
        return Path(self.workdir)

    def seed_for(self, label: str) -> int:
        return derive_seed(self.seed, label)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def derive_seed(master: int, label: str) -> int:
    """Stable 32-bit sub-seed for ``label`` under ``master``."""
    h = hashlib.sha256(f"{int(master)}:{label}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: {value!r} does not match {tp}")
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, where="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data)
