"""Run configuration: dataclasses mirrored by a strict JSON file format.

Unknown keys anywhere in the file are an error; missing keys take the
documented dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .sap import LAYER_MODES

FUSION_VARIANTS = ("ours", "naive_concat", "naive_attention", "single_optical", "single_sar")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclasses.dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 2
    width: int = 32
    seg_tokens: int = 1
    grid: tuple[int, int] = (4, 4)
    ffn_hidden: int | None = None
    use_positions: bool = True


@dataclasses.dataclass
class DataConfig:
    height: int = 32
    width: int = 32
    min_objects: int = 1
    max_objects: int = 3
    classes: int = 4
    p_opt_only: float = 0.0
    p_sar_only: float = 0.0
    p_both: float = 1.0
    cloud_density: float = 0.0
    speckle: float = 0.2
    train_scenes: int = 100
    eval_scenes: int = 40


@dataclasses.dataclass
class LossWeights:
    ce: float = 1.0
    dice: float = 1.0
    kl: float = 0.1
    cl: float = 0.1


@dataclasses.dataclass
class SapConfig:
    mode: str = "all"
    reverse_kl: bool = False


@dataclasses.dataclass
class FusionConfig:
    variant: str = "ours"
    mutual_attention: bool = True
    queries: int = 4
    temperature: float = 0.07


@dataclasses.dataclass
class OptimizerConfig:
    step_size: float = 0.01
    steps: int = 300
    batch_size: int = 8


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    loss: LossWeights = dataclasses.field(default_factory=LossWeights)
    sap: SapConfig = dataclasses.field(default_factory=SapConfig)
    fusion: FusionConfig = dataclasses.field(default_factory=FusionConfig)
    optimizer: OptimizerConfig = dataclasses.field(default_factory=OptimizerConfig)
    seed: int = 0
    joint_training: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.sap.mode not in LAYER_MODES:
            raise ConfigError(f"sap.mode must be one of {LAYER_MODES}, got {self.sap.mode!r}")
        if self.fusion.variant not in FUSION_VARIANTS:
            raise ConfigError(f"fusion.variant must be one of {FUSION_VARIANTS}, got {self.fusion.variant!r}")
        for name in ("ce", "dice", "kl", "cl"):
            if getattr(self.loss, name) < 0:
                raise ConfigError(f"loss.{name} must be nonnegative")
        if not self.optimizer.step_size > 0:
            raise ConfigError("optimizer.step_size must be positive")
        if self.optimizer.steps < 0 or self.optimizer.batch_size < 1:
            raise ConfigError("optimizer.steps must be >= 0 and batch_size >= 1")
        if self.model.width % self.model.heads != 0:
            raise ConfigError("model.width must be divisible by model.heads")
        ht, wt = self.model.grid
        if self.data.height % ht != 0 or self.data.width % wt != 0:
            raise ConfigError(f"image size {(self.data.height, self.data.width)} "
                              f"not divisible by token grid {self.model.grid}")
        if not self.fusion.temperature > 0:
            raise ConfigError("fusion.temperature must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "loss": LossWeights,
    "sap": SapConfig,
    "fusion": FusionConfig,
    "optimizer": OptimizerConfig,
}


def _build_section(cls, payload, path):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {path!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(payload) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {path!r}")
    kwargs = {}
    for name, value in payload.items():
        if name == "grid":
            if (not isinstance(value, list) or len(value) != 2
                    or not all(isinstance(v, int) for v in value)):
                raise ConfigError("model.grid must be a pair of integers")
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in section {path!r}: {exc}") from exc


def config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    known = set(_SECTIONS) | {"seed", "joint_training"}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in payload:
            kwargs[name] = _build_section(cls, payload[name], name)
    if "seed" in payload:
        if not isinstance(payload["seed"], int) or isinstance(payload["seed"], bool):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = payload["seed"]
    if "joint_training" in payload:
        if not isinstance(payload["joint_training"], bool):
            raise ConfigError("joint_training must be a boolean")
        kwargs["joint_training"] = payload["joint_training"]
    try:
        return RunConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def config_to_dict(config: RunConfig) -> dict:
    out = dataclasses.asdict(config)
    out["model"]["grid"] = list(out["model"]["grid"])
    return out


def replace(config: RunConfig, **overrides) -> RunConfig:
    """Functional update of nested sections, e.g. replace(cfg, loss=..., seed=...)."""
    return dataclasses.replace(config, **overrides)
