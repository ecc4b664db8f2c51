"""Shared types, configuration loading and box geometry."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np


class ConfigError(ValueError):
    """Config file could not be parsed or contains an unknown/ill-typed key."""


class ValidationError(ValueError):
    """A value violates a documented invariant."""


@dataclass(frozen=True)
class TrainConfig:
    # problem size
    num_sources: int = 2
    num_classes: int = 3
    proto_dim: int = 16
    # loss weights; alpha/beta/tau/ema_momentum are the published defaults
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 1.2
    pseudo_label_threshold: float = 0.7
    ema_momentum: float = 0.9996
    # schedule
    burn_in_epochs: int = 15
    adapt_epochs: int = 15
    batch_size: int = 4
    learning_rate: float = 0.02
    seed: int = 0
    # artifact-level knobs
    sgd_momentum: float = 0.9
    grad_clip: float = 10.0  # <= 0 disables clipping
    nms_iou: float = 0.5
    eval_score_threshold: float = 0.05
    roi_size: int = 3
    feature_channels: int = 48
    head_hidden: int = 48
    proto_hidden: int = 64
    disc_hidden: int = 64
    use_alignment: bool = True
    use_separation: bool = True

    def __post_init__(self) -> None:
        for name in ("num_sources", "num_classes", "proto_dim", "batch_size", "roi_size",
                     "feature_channels", "head_hidden", "proto_hidden", "disc_hidden"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValidationError(f"{name} must be a finite nonnegative real, got {v}")
        for name in ("pseudo_label_threshold", "ema_momentum", "nms_iou", "eval_score_threshold",
                     "sgd_momentum"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        for name in ("burn_in_epochs", "adapt_epochs"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")

    # alias names used throughout the training code
    @property
    def tau(self) -> float:
        return self.pseudo_label_threshold

    @property
    def num_domains(self) -> int:
        """Sources plus the target domain."""
        return self.num_sources + 1

    @property
    def target_index(self) -> int:
        return self.num_sources

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, value: Any) -> Any:
    kind = _FIELD_TYPES[key]
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a boolean, got {value!r}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key {key!r} must be a number, got {value!r}")
    return float(value)


def config_from_dict(raw: dict[str, Any]) -> TrainConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    return TrainConfig(**{k: _coerce(k, v) for k, v in raw.items()})


def load_config(path: str | Path) -> TrainConfig:
    """Read a flat JSON config; absent keys take the defaults of :class:`TrainConfig`.

    An empty file is accepted and means "all defaults".
    """
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return TrainConfig()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(raw)


def dump_config(config: TrainConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)


def save_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(config) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def scaled(self, sx: float, sy: float) -> "Box":
        return Box(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)

    def inside(self, width: float, height: float) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height


@dataclass(frozen=True)
class Annotation:
    box: Box
    class_id: int

    def check(self, num_classes: int) -> None:
        if not 0 <= self.class_id < num_classes:
            raise ValidationError(f"class_id {self.class_id} outside [0, {num_classes})")


@dataclass(frozen=True, order=True)
class DomainId:
    """Domain index; sources are ``0..N-1`` and the target is ``N``."""

    index: int

    def check(self, num_sources: int) -> None:
        if not 0 <= self.index <= num_sources:
            raise ValidationError(f"domain index {self.index} outside [0, {num_sources}]")

    def is_target(self, num_sources: int) -> bool:
        return self.index == num_sources


@dataclass(frozen=True)
class LossBreakdown:
    """Loss components of one step together with the weights that combine them."""

    sup: float
    unsup: float
    dis: float
    prot: float
    total: float
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self) -> None:
        expected = self.sup + self.alpha * self.unsup + self.beta * self.dis + self.gamma * self.prot
        if self.total != expected:
            raise ValidationError(f"total {self.total!r} != weighted sum {expected!r}")

    @classmethod
    def combine(cls, sup: float, unsup: float, dis: float, prot: float,
                alpha: float, beta: float, gamma: float) -> "LossBreakdown":
        total = sup + alpha * unsup + beta * dis + gamma * prot
        return cls(sup, unsup, dis, prot, total, alpha, beta, gamma)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: int, names: list[str]) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one seed (one per purpose)."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: make_rng(child) for name, child in zip(names, children)}
