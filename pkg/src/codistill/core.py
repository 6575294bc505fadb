"""Shared domain types, shape contracts and configuration.

All module boundaries exchange channel-last arrays: images are H x W x C,
batched feature volumes are B x h x w x F, logits are B x H x W x C.
Core types are immutable value objects and safe to share across threads.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

IGNORE_INDEX = 255


class Modality(Enum):
    RGB = "rgb"
    DEPTH = "depth"

    @property
    def in_channels(self) -> int:
        return 3 if self is Modality.RGB else 1

    @property
    def other(self) -> "Modality":
        return Modality.DEPTH if self is Modality.RGB else Modality.RGB


# Pre-softmax class scores, rank-4 channel-last (B x H x W x C) at full
# label resolution.
SegLogits = torch.Tensor


class ConfigError(ValueError):
    """Invalid configuration value or file."""


@dataclass(frozen=True)
class RGBDSample:
    """One scene: paired RGB image, depth map and label map.

    rgb: H x W x 3 float in [0, 1]; depth: H x W x 1 float in [0, 1];
    labels: H x W int with values in {0..C-1} or ignore_index.
    """

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray

    def validate(self, num_classes: int, ignore_index: int = IGNORE_INDEX) -> "RGBDSample":
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be H x W x 3, got {self.rgb.shape}")
        if self.depth.ndim != 3 or self.depth.shape[2] != 1:
            raise ValueError(f"depth must be H x W x 1, got {self.depth.shape}")
        if self.labels.ndim != 2:
            raise ValueError(f"labels must be H x W, got {self.labels.shape}")
        if self.rgb.shape[:2] != self.depth.shape[:2] or self.rgb.shape[:2] != self.labels.shape:
            raise ValueError(
                "spatial dims differ: rgb %s, depth %s, labels %s"
                % (self.rgb.shape[:2], self.depth.shape[:2], self.labels.shape)
            )
        valid = (self.labels == ignore_index) | (
            (self.labels >= 0) & (self.labels < num_classes)
        )
        if not valid.all():
            bad = np.unique(self.labels[~valid])
            raise ValueError(f"labels contain invalid class ids {bad.tolist()}")
        return self


@dataclass(frozen=True)
class FeatureVolume:
    """Encoder output split into invariant and specific halves.

    Both halves are B x h x w x (F/2) with F the encoder channel width.
    """

    inv: torch.Tensor
    spc: torch.Tensor
    modality: Modality

    def __post_init__(self) -> None:
        if self.inv.shape != self.spc.shape:
            raise ValueError(
                f"inv/spc shapes differ: {tuple(self.inv.shape)} vs {tuple(self.spc.shape)}"
            )
        if self.inv.ndim != 4:
            raise ValueError(f"feature halves must be rank 4, got rank {self.inv.ndim}")

    @property
    def half_channels(self) -> int:
        return self.inv.shape[-1]


@dataclass(frozen=True)
class PooledEmbedding:
    """Spatially pooled, L2-normalized instance vectors, one row per sample.

    p: B x (F/2); rows have unit norm up to the epsilon guard (all-zero
    feature maps pool to a zero row, which the guard keeps finite).
    """

    p: torch.Tensor
    modality: Modality


@dataclass
class LossReport:
    """Per-term scalar losses for one step (disabled terms report 0)."""

    seg_rgb: float = 0.0
    seg_d: float = 0.0
    orth_rgb: float = 0.0
    orth_d: float = 0.0
    con_rgb: float = 0.0
    con_d: float = 0.0
    aux_rgb: float = 0.0
    aux_d: float = 0.0
    total: float = 0.0

    TERM_NAMES = ("seg_rgb", "seg_d", "orth_rgb", "orth_d", "con_rgb", "con_d", "aux_rgb", "aux_d")

    def term_sum(self) -> float:
        return float(sum(getattr(self, name) for name in self.TERM_NAMES))

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.TERM_NAMES + ("total",)}


@dataclass
class TrainConfig:
    """All hyperparameters, ablation toggles, seeds and schedule parameters."""

    num_classes: int = 4
    epochs: int = 140
    batch_size: int = 8
    lr_start: float = 1e-8
    lr_target: float = 1e-4
    warmup_epochs: int = 10
    poly_power: float = 0.9
    tau: float = 0.07
    mixup_lambda: float = 0.35
    use_orth: bool = True
    use_con: bool = True
    use_aux: bool = True
    use_mixup: bool = True
    use_decoupled_aug: bool = True
    seed: int = 0
    backbone: str = "tiny"
    ignore_index: int = IGNORE_INDEX
    # Optimizer defaults (decoupled weight decay, Adam-style moments).
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    # Augmentation magnitudes; documented assumptions, exposed for sweeps.
    aug_scale_min: float = 0.75
    aug_scale_max: float = 1.25
    aug_jitter: float = 0.2
    # Contrastive denominator: set True to also count the positive pair
    # as in the canonical InfoNCE formulation. Default keeps negatives only.
    con_include_positive: bool = False
    # Loop plumbing.
    checkpoint_every: int = 20
    eval_every: int = 1
    deterministic: bool = True

    def toggles(self) -> dict[str, bool]:
        return {
            "use_orth": self.use_orth,
            "use_con": self.use_con,
            "use_aux": self.use_aux,
            "use_mixup": self.use_mixup,
            "use_decoupled_aug": self.use_decoupled_aug,
        }


def validate_config(cfg: TrainConfig) -> TrainConfig:
    """Return cfg unchanged if every invariant holds, else raise ConfigError.

    Reports the first violated bound.
    """
    if cfg.num_classes < 2:
        raise ConfigError("num_classes must be at least 2")
    if cfg.epochs < 1:
        raise ConfigError("epochs must be positive")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be positive")
    if not 0.0 <= cfg.mixup_lambda <= 1.0:
        raise ConfigError("mixup_lambda out of range")
    if cfg.tau <= 0.0:
        raise ConfigError("temperature must be positive")
    if cfg.warmup_epochs < 0 or cfg.warmup_epochs > cfg.epochs:
        raise ConfigError("warmup_epochs must lie in [0, epochs]")
    if cfg.lr_start < 0 or cfg.lr_target <= 0:
        raise ConfigError("learning rates must be positive")
    if cfg.poly_power <= 0:
        raise ConfigError("poly_power must be positive")
    if not 0.0 < cfg.aug_scale_min <= cfg.aug_scale_max:
        raise ConfigError("aug scale range must satisfy 0 < min <= max")
    if cfg.aug_jitter < 0:
        raise ConfigError("aug_jitter must be non-negative")
    if cfg.ignore_index >= 0 and cfg.ignore_index < cfg.num_classes:
        raise ConfigError("ignore_index collides with a class id")
    return cfg


# Dotted config-file keys accepted as aliases for dataclass field names.
_KEY_ALIASES = {
    "aug.scale_min": "aug_scale_min",
    "aug.scale_max": "aug_scale_max",
    "aug.jitter": "aug_jitter",
    "aug.decoupled": "use_decoupled_aug",
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {key}: {raw!r}")
    try:
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def set_config_value(cfg: TrainConfig, key: str, raw: str) -> None:
    """Apply one `key=value` override in place; key may use a dotted alias."""
    name = _KEY_ALIASES.get(key, key)
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key: {key}")
    setattr(cfg, name, _parse_value(name, raw))


def _iter_config_lines(text: str) -> Iterator[tuple[str, str]]:
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, raw = stripped.split("=", 1)
        yield key.strip(), raw.strip()


def load_config(path: str | Path, overrides: list[str] | None = None) -> TrainConfig:
    """Read a flat `key = value` config file and apply CLI overrides."""
    cfg = TrainConfig()
    text = Path(path).read_text()
    for key, raw in _iter_config_lines(text):
        set_config_value(cfg, key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_config_value(cfg, key.strip(), raw)
    return validate_config(cfg)


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


def config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(data: dict) -> TrainConfig:
    known = {k: v for k, v in data.items() if k in _FIELD_TYPES}
    return TrainConfig(**known)
