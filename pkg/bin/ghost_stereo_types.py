"""Shared data contracts, configuration and errors for Ghost-Stereo.

Shape conventions used across the package:

- images are ``[B, 3, H, W]`` (or ``[3, H, W]`` for a single sample), values
  in ``[0, 1]``; the model applies the per-channel normalization stored in
  ``ModelConfig.image_mean`` / ``image_std``
- cost volumes are ``[B, C, D, H, W]`` with ``D = max_disparity // 4``
- disparity maps are ``[..., H, W]`` in pixels of the map's own resolution
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Literal, Optional

import torch

SCHEMA_VERSION = 1

PRESETS = ("desk", "paper", "kitti")
PHASES = ("pretrain", "finetune")

# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class GhostStereoError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(GhostStereoError, ValueError):
    pass


class ShapeError(GhostStereoError, ValueError):
    pass


class ShapeMismatch(ShapeError):
    pass


class GroupDivisibilityError(ShapeError):
    pass


class NonFiniteImage(GhostStereoError, ValueError):
    pass


class UnknownBlockKind(GhostStereoError, TypeError):
    pass


class WeightNormalizationError(GhostStereoError, AssertionError):
    pass


class BadMagic(GhostStereoError, ValueError):
    pass


class TruncatedPayload(GhostStereoError, ValueError):
    pass


class BitDepthError(GhostStereoError, ValueError):
    pass


class DisparityRangeError(GhostStereoError, ValueError):
    pass


class EmptyMaskError(GhostStereoError, ValueError):
    pass


class CheckpointError(GhostStereoError):
    pass


class TrainingAborted(GhostStereoError, RuntimeError):
    """Raised when a step produces a non-finite loss."""

    def __init__(self, message: str, *, epoch: int, batch_id: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch_id = batch_id


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    max_disparity: int = 192
    num_groups: int = 32
    topk: int = 2
    ghost_ratio: int = 2
    cheap_kernel: int = 3
    se_reduction: int = 4
    use_se: bool = True
    use_cve: bool = True
    use_cva: bool = True
    stem_channels: int = 16
    feature_channels: tuple[int, ...] = (24, 40, 80, 160)
    decoder_channels: Optional[tuple[int, ...]] = None
    encoder_expansion: int = 2
    bypass_channels: int = 32
    fused_channels: int = 320
    aggregation_channels: tuple[int, ...] = (32, 64, 128, 192)
    bottleneck_expansion: int = 2
    upsample_hidden: int = 64
    loss_weights: tuple[float, ...] = (0.3, 1.0)
    image_mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    image_std: tuple[float, ...] = (0.229, 0.224, 0.225)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_disparity <= 0 or self.max_disparity % 4:
            raise ConfigError(f"max_disparity must be a positive multiple of 4, got {self.max_disparity}")
        # The hourglass halves the disparity axis three times.
        if self.disparity_levels % 8:
            raise ConfigError(
                f"max_disparity / 4 must be divisible by 8 for the hourglass, got {self.disparity_levels}"
            )
        if self.num_groups <= 0 or self.fused_channels % self.num_groups:
            raise ConfigError(
                f"num_groups={self.num_groups} must divide fused_channels={self.fused_channels}"
            )
        if not 1 <= self.topk <= self.disparity_levels:
            raise ConfigError(f"topk must be in [1, {self.disparity_levels}], got {self.topk}")
        if self.ghost_ratio < 2:
            raise ConfigError(f"ghost_ratio must be >= 2, got {self.ghost_ratio}")
        if self.cheap_kernel % 2 == 0:
            raise ConfigError(f"cheap_kernel must be odd, got {self.cheap_kernel}")
        if len(self.feature_channels) != 4:
            raise ConfigError("feature_channels needs exactly four widths (scales 1/4 .. 1/32)")
        if len(self.decoder_widths) != 4 or self.decoder_widths[3] != self.feature_channels[3]:
            raise ConfigError(
                "decoder_channels must list four widths and start from the 1/32 encoder width "
                f"{self.feature_channels[3]}"
            )
        if len(self.aggregation_channels) != 4 or self.aggregation_channels[0] != self.num_groups:
            raise ConfigError("aggregation_channels needs four widths and must start at num_groups")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0:
            raise ConfigError("loss_weights must be two non-negative numbers")
        if len(self.image_mean) != 3 or len(self.image_std) != 3 or min(self.image_std) <= 0:
            raise ConfigError("image_mean/image_std must have three entries, std > 0")

    @property
    def disparity_levels(self) -> int:
        return self.max_disparity // 4

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return self.decoder_channels if self.decoder_channels is not None else self.feature_channels

    def to_dict(self) -> dict[str, Any]:
        return _to_dict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return _from_dict(cls, data)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class TrainConfig:
    phase: Literal["pretrain", "finetune"] = "pretrain"
    epochs: int = 20
    batch_size: int = 4
    crop: Optional[tuple[int, ...]] = (256, 512)
    lr: float = 1e-3
    betas: tuple[float, ...] = (0.9, 0.999)
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    rounds: int = 1
    restart_schedule: bool = True
    num_workers: int = 0
    checkpoint_every: int = 1
    synthetic_pairs: int = 2
    synthetic_size: tuple[int, ...] = (64, 96)

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.epochs <= 0 or self.batch_size <= 0 or self.rounds <= 0:
            raise ConfigError("epochs, batch_size and rounds must be positive")
        if self.crop is not None and (len(self.crop) != 2 or min(self.crop) <= 0):
            raise ConfigError(f"crop must be (height, width), got {self.crop}")
        if self.checkpoint_every <= 0:
            raise ConfigError("checkpoint_every must be positive")
        if len(self.synthetic_size) != 2:
            raise ConfigError("synthetic_size must be (height, width)")

    def to_dict(self) -> dict[str, Any]:
        return _to_dict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return _from_dict(cls, data)


def _to_dict(obj: Any) -> dict[str, Any]:
    data: dict[str, Any] = {"schema_version": SCHEMA_VERSION}
    for f in fields(obj):
        value = getattr(obj, f.name)
        data[f.name] = list(value) if isinstance(value, tuple) else value
    return data


def _from_dict(cls: type, data: dict[str, Any]) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"{cls.__name__} must be a JSON object")
    payload = dict(data)
    version = payload.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def preset_configs(name: str) -> tuple[ModelConfig, TrainConfig]:
    """Return the (model, train) configuration bundle for a named preset."""
    if name == "paper":
        return ModelConfig(), TrainConfig(rounds=2)
    if name == "kitti":
        # fine-tune the full-size model from a SceneFlow checkpoint (see --init-from)
        return ModelConfig(), TrainConfig(phase="finetune", epochs=600)
    if name == "desk":
        model = ModelConfig(
            max_disparity=32,
            num_groups=8,
            stem_channels=8,
            feature_channels=(8, 16, 24, 32),
            bypass_channels=16,
            fused_channels=32,
            aggregation_channels=(8, 16, 32, 48),
            upsample_hidden=32,
        )
        train = TrainConfig(
            phase="finetune",
            epochs=500,
            batch_size=2,
            crop=None,
            checkpoint_every=50,
        )
        return model, train
    raise ConfigError(f"unknown preset {name!r} (expected one of {PRESETS})")


def load_run_config(
    path: Optional[Path],
    preset: str = "desk",
) -> tuple[ModelConfig, TrainConfig]:
    """Resolve preset defaults overlaid with an optional JSON run config."""
    model, train = preset_configs(preset)
    if path is None:
        return model, train
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(raw) - {"schema_version", "model", "train"})
    if unknown:
        raise ConfigError(f"unknown run config keys in {path}: {', '.join(unknown)}")
    if raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version in {path}")
    for section in ("model", "train"):
        if section in raw and not isinstance(raw[section], dict):
            kind = type(raw[section]).__name__
            raise ConfigError(f"\"{section}\" in {path} must be a JSON object, got {kind}")
    if "model" in raw:
        model = ModelConfig.from_dict({**_to_dict(model), **raw["model"]})
    if "train" in raw:
        train = TrainConfig.from_dict({**_to_dict(train), **raw["train"]})
    return model, train


def override(config: Any, **changes: Any) -> Any:
    """``dataclasses.replace`` that ignores ``None`` values (unset CLI flags)."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return config
    try:
        return replace(config, **changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Data contracts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StereoSample:
    left: torch.Tensor
    right: torch.Tensor
    gt_disparity: Optional[torch.Tensor] = None
    valid_mask: Optional[torch.Tensor] = None
    obj_mask: Optional[torch.Tensor] = None

    @property
    def size(self) -> tuple[int, int]:
        return int(self.left.shape[-2]), int(self.left.shape[-1])


@dataclass(frozen=True)
class DisparityMap:
    """Per-pixel disparity; ``scale`` is the downsampling factor (1 or 4)."""

    values: torch.Tensor
    scale: int = 1

    def __post_init__(self) -> None:
        if self.scale not in (1, 4):
            raise ConfigError(f"disparity map scale must be 1 or 4, got {self.scale}")

    def is_valid(self) -> bool:
        v = self.values
        return bool(torch.isfinite(v).all()) and bool((v >= 0).all())


@dataclass(frozen=True)
class CostVolume:
    values: torch.Tensor
    num_groups: int = field(default=0)

    def __post_init__(self) -> None:
        if self.values.dim() != 5:
            raise ShapeError(f"cost volume must be [B, C, D, H, W], got {tuple(self.values.shape)}")

    @property
    def channels(self) -> int:
        return int(self.values.shape[1])

    @property
    def disparity_levels(self) -> int:
        return int(self.values.shape[2])


def validate_sample(sample: StereoSample, config: ModelConfig) -> StereoSample:
    """Check a sample and attach its validity mask.

    The mask keeps pixels whose ground truth is finite and strictly inside
    ``(0, max_disparity)``; an existing mask (occlusions) is intersected, which
    keeps the operation idempotent.
    """
    left, right = sample.left, sample.right
    if left.dim() != 3 or left.shape[0] != 3:
        raise ShapeMismatch(f"left image must be [3, H, W], got {tuple(left.shape)}")
    if left.shape != right.shape:
        raise ShapeMismatch(
            f"left {tuple(left.shape)} and right {tuple(right.shape)} images differ in shape"
        )
    if not (torch.isfinite(left).all() and torch.isfinite(right).all()):
        raise NonFiniteImage("stereo pair contains NaN or Inf pixels")
    gt = sample.gt_disparity
    if gt is None:
        return sample
    if tuple(gt.shape) != tuple(left.shape[-2:]):
        raise ShapeMismatch(f"ground truth {tuple(gt.shape)} does not match image {tuple(left.shape[-2:])}")
    finite = torch.isfinite(gt)
    safe = torch.where(finite, gt, torch.zeros_like(gt))
    mask = finite & (safe > 0) & (safe < config.max_disparity)
    if sample.valid_mask is not None:
        if tuple(sample.valid_mask.shape) != tuple(gt.shape):
            raise ShapeMismatch("valid_mask does not match ground truth shape")
        mask = mask & sample.valid_mask.bool()
    return replace(sample, valid_mask=mask)
