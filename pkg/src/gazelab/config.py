"""Structured run configuration read from JSON; unknown keys are errors."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import Condition, LossWeights
from .swapnet import ArchConfig, TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    """Standalone dataset for ``gen-data``."""

    n_identities: int = 8
    frames_per_identity: int = 32
    image_size: int = 64
    write_masks: bool = True


@dataclass(frozen=True)
class BenchmarkConfig:
    image_size: int = 64
    n_couples: int = 4              # each look-alike couple yields two ordered pairs
    lookalike_radius: float = 0.35
    pair_train_frames: int = 64
    pair_test_frames: int = 24
    corpus_identities: int = 32
    corpus_frames: int = 24


@dataclass(frozen=True)
class ExpertConfig:
    input_size: int = 64
    channels: tuple = (8, 16, 32)
    hidden: int = 64
    epochs: int = 30
    warmup_epochs: int = 2
    batch_size: int = 32
    lr: float = 1e-3
    train_identities: int = 120
    train_frames: int = 40
    test_identities: int = 10
    test_frames: int = 20
    degrade_deg: float = 0.0


@dataclass(frozen=True)
class ScheduleConfig:
    pretrain_iters: int = 5000
    pair_iters: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    log_every: int = 25

    def to_schedule(self, condition, seed: int) -> TrainSchedule:
        return TrainSchedule(self.pretrain_iters, self.pair_iters, self.batch_size, self.lr,
                             Condition(condition), seed, self.log_every)


@dataclass(frozen=True)
class WeightsConfig:
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 10.0
    lambda_em: float = 300.0
    alpha: float = 3.0
    beta: float = 30.0
    theta_detached: bool = False

    def to_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda_em, self.alpha, self.beta,
                           theta_detached=self.theta_detached)


@dataclass(frozen=True)
class ArchSection:
    latent_dim: int = 128
    enc_channels: tuple = (8, 16, 32)
    enc_kernel: int = 5
    dec_channels: tuple = (32, 32, 16)
    dec_kernel: int = 3

    def to_arch(self, image_size: int) -> ArchConfig:
        return ArchConfig(image_size, self.latent_dim, tuple(self.enc_channels), self.enc_kernel,
                          tuple(self.dec_channels), self.dec_kernel)


ALL_CONDITIONS = tuple(c.value for c in Condition)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str | None = None
    conditions: tuple = ALL_CONDITIONS
    data: DataConfig = field(default_factory=DataConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    arch: ArchSection = field(default_factory=ArchSection)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        for c in self.conditions:
            if c not in ALL_CONDITIONS:
                raise ConfigError(f"unknown condition {c!r}; expected one of {list(ALL_CONDITIONS)}")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def with_overrides(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name in fields else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}{name}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where}{name}: expected true/false, got {value!r}")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}{name}: expected a number, got {value!r}")
            if isinstance(default, int) and not isinstance(value, int):
                raise ConfigError(f"{where}{name}: expected an integer, got {value!r}")
            kwargs[name] = value
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)
