"""Run configuration: a single JSON document covering every tunable.

Unknown keys are rejected, and a short hash of the canonical JSON is
embedded in every artifact (CSV headers, checkpoints, manifests) so any
output can be traced back to the exact configuration that produced it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration (unknown key, bad value, inconsistent sizes)."""


@dataclass
class ScheduleConfig:
    # Baseline (beta_start, beta_end) pair is quoted for a 1000-step run and
    # rescaled by 1000/total_steps so the cumulative signal decay is
    # preserved at any step count.
    total_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class ModelConfig:
    image_size: int = 64
    in_channels: int = 1
    base_width: int = 16
    depth: int = 4
    time_embed_dim: int = 64
    anchor_mode: str = "usa"  # none | sa | usa
    anchor_kernel_size: int = 5


@dataclass
class SSFormerConfig:
    enabled: bool = True
    n_blocks: int = 4
    nbp_blocks: int = 6
    enable_filter: bool = True
    token_dim: int = 128
    patch_size: int = 1
    nbp_hidden: int = 16
    mlp_hidden: int = 128
    # The reference text and its formula disagree on which side carries the
    # query projection; default follows the formula (condition side).
    swap_query_key: bool = False


@dataclass
class LossConfig:
    alpha: int = 5
    beta: float = 10.0

    def __post_init__(self):
        if self.alpha < 1:
            raise ConfigError(f"loss.alpha must be >= 1, got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"loss.beta must be >= 0, got {self.beta}")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    loss_ema_decay: float = 0.99


@dataclass
class EnsembleConfig:
    n_runs: int = 10
    sample_steps: int = 100
    staple_max_iters: int = 50
    staple_tol: float = 1e-6
    chunk_size: int = 10


@dataclass
class DataConfig:
    root: str = "data"
    n_train: int = 200
    n_test: int = 50
    size: int = 64
    ambiguity: float = 0.3
    seed: int = 7


@dataclass
class RunConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    ssformer: SSFormerConfig = field(default_factory=SSFormerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]

    def validate(self) -> "RunConfig":
        if self.ensemble.sample_steps > self.schedule.total_steps:
            raise ConfigError(
                f"ensemble.sample_steps ({self.ensemble.sample_steps}) exceeds "
                f"schedule.total_steps ({self.schedule.total_steps})"
            )
        if self.model.anchor_mode not in ("none", "sa", "usa"):
            raise ConfigError(f"model.anchor_mode must be none|sa|usa, got {self.model.anchor_mode!r}")
        size = self.model.image_size
        if size % (2 ** self.model.depth) != 0:
            raise ConfigError(f"model.image_size {size} not divisible by 2^depth")
        if self.model.anchor_kernel_size % 2 != 1:
            raise ConfigError("model.anchor_kernel_size must be odd")
        bottleneck = size // 2 ** self.model.depth
        if bottleneck % self.ssformer.patch_size != 0:
            raise ConfigError("bottleneck size not divisible by ssformer.patch_size")
        return self


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig) if f.name != "seed"}
_SECTION_TYPES = {
    "schedule": ScheduleConfig,
    "model": ModelConfig,
    "ssformer": SSFormerConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "ensemble": EnsembleConfig,
    "data": DataConfig,
}


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config key(s) under '{path}': {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> RunConfig:
    """Build a validated RunConfig from a plain dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    known = {"seed"} | set(_SECTION_TYPES)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    if "seed" in data:
        kwargs["seed"] = int(data["seed"])
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            section = data[name]
            if not isinstance(section, dict):
                raise ConfigError(f"config section '{name}' must be an object")
            kwargs[name] = _build_section(cls, section, name)
    return RunConfig(**kwargs).validate()


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (CLI flags beat file values).

    Values are parsed as JSON literals, falling back to bare strings so
    ``model.anchor_mode=usa`` works without quoting.
    """
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section in override: {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key in override: {key!r}")
        node[parts[-1]] = value
    return config_from_dict(data)


def toy_config(**overrides: Any) -> RunConfig:
    """Desk-scale defaults used across tests and the acceptance protocol."""
    cfg = RunConfig()
    data = cfg.to_dict()
    for key, value in overrides.items():
        node = data
        parts = key.split("__")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    return config_from_dict(data)
