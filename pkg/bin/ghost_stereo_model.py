"""End-to-end network: features -> GwC volume -> CVE -> CVA -> top-k -> upsample."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ghost_stereo_aggregation import GhostCVA
from ghost_stereo_blocks import init_weights
from ghost_stereo_cost import GhostCVE, build_gwc_volume
from ghost_stereo_features import ENCODER_STRIDE, FeatureExtractor
from ghost_stereo_regression import UpsampleWeightHead, convex_upsample, predict_upsample_weights, topk_disparity
from ghost_stereo_types import DisparityMap, ModelConfig, ShapeMismatch


@dataclass
class StereoPrediction:
    full: DisparityMap
    quarter: DisparityMap
    scores: Optional[torch.Tensor] = None


class GhostStereo(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.features = FeatureExtractor(config)
        self.cve = GhostCVE(config)
        self.cva = GhostCVA(config, config.decoder_widths[1:])
        self.upsample = UpsampleWeightHead(config.fused_channels + config.bypass_channels, config.upsample_hidden)
        self.register_buffer("mean", torch.tensor(config.image_mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(config.image_std).view(1, 3, 1, 1), persistent=False)

    def normalize(self, image: torch.Tensor) -> torch.Tensor:
        return (image - self.mean.to(image.dtype)) / self.std.to(image.dtype)

    def forward(self, left: torch.Tensor, right: torch.Tensor) -> StereoPrediction:
        if left.shape != right.shape:
            raise ShapeMismatch(f"left {tuple(left.shape)} and right {tuple(right.shape)} differ")
        if left.dim() == 3:
            left, right = left.unsqueeze(0), right.unsqueeze(0)
        cfg = self.config
        feat_l = self.features(self.normalize(left))
        feat_r = self.features(self.normalize(right))
        volume = build_gwc_volume(feat_l.fused, feat_r.fused, cfg.num_groups, cfg.disparity_levels)
        volume = self.cve(volume, feat_l.fused)
        scores = self.cva(volume, feat_l.context)
        quarter = topk_disparity(scores, cfg.topk)
        weights = predict_upsample_weights(feat_l.fused, feat_l.bypass, self.upsample)
        full = convex_upsample(quarter, weights)
        return StereoPrediction(full=full, quarter=quarter, scores=scores)


def build_model(config: ModelConfig) -> GhostStereo:
    """Seeded construction with He initialization."""
    torch.manual_seed(config.seed)
    model = GhostStereo(config)
    init_weights(model)
    return model


def pad_to_multiple(image: torch.Tensor, multiple: int = ENCODER_STRIDE) -> tuple[torch.Tensor, tuple[int, int]]:
    """Replicate-pad bottom and right so H and W are multiples of ``multiple``."""
    h, w = int(image.shape[-2]), int(image.shape[-1])
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return image, (h, w)
    batched = image if image.dim() == 4 else image.unsqueeze(0)
    padded = F.pad(batched, (0, pad_w, 0, pad_h), mode="replicate")
    return (padded if image.dim() == 4 else padded.squeeze(0)), (h, w)


def crop_to_size(tensor: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    h, w = size
    return tensor[..., :h, :w]
