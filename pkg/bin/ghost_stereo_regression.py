"""Top-k disparity regression and learned 3x3 convex upsampling."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ghost_stereo_types import ConfigError, DisparityMap, ShapeMismatch, WeightNormalizationError

UPSAMPLE_FACTOR = 4
NEIGHBORS = 9
WEIGHT_SUM_TOLERANCE = 1e-4


def topk_disparity(volume: torch.Tensor, k: int) -> DisparityMap:
    """Expected disparity over the ``k`` highest scores per pixel.

    ``volume`` is ``[B, D, H, W]`` holding scores (higher is a better match).
    Equal scores keep ascending disparity order, so ties go to the lowest
    index. Values are in quarter-resolution pixel units.
    """
    if volume.dim() != 4:
        raise ShapeMismatch(f"expected a [B, D, H, W] score volume, got {tuple(volume.shape)}")
    levels = volume.shape[1]
    if not 1 <= k <= levels:
        raise ConfigError(f"k must be in [1, {levels}], got {k}")
    scores, index = torch.sort(volume, dim=1, descending=True, stable=True)
    scores, index = scores[:, :k], index[:, :k]
    prob = F.softmax(scores, dim=1)
    disp = (prob * index.to(prob.dtype)).sum(dim=1)
    return DisparityMap(disp, scale=4)


def soft_argmax(volume: torch.Tensor) -> torch.Tensor:
    levels = volume.shape[1]
    candidates = torch.arange(levels, dtype=volume.dtype, device=volume.device).view(1, levels, 1, 1)
    return (F.softmax(volume, dim=1) * candidates).sum(dim=1)


class UpsampleWeightHead(nn.Module):
    """Predict ``[B, 9, 4, 4, H, W]`` convex combination weights."""

    def __init__(self, in_channels: int, hidden_channels: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden_channels, NEIGHBORS * UPSAMPLE_FACTOR ** 2, 1)

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        return self.conv2(F.relu(self.conv1(features)))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        b, _, h, w = features.shape
        raw = self.logits(features).view(b, NEIGHBORS, UPSAMPLE_FACTOR, UPSAMPLE_FACTOR, h, w)
        return F.softmax(raw, dim=1)


def predict_upsample_weights(fused: torch.Tensor, bypass: torch.Tensor, head: UpsampleWeightHead) -> torch.Tensor:
    if fused.shape[-2:] != bypass.shape[-2:]:
        raise ShapeMismatch(f"fused {tuple(fused.shape[-2:])} and bypass {tuple(bypass.shape[-2:])} differ")
    return head(torch.cat([fused, bypass], dim=1))


def convex_upsample(disp: DisparityMap, weights: torch.Tensor) -> DisparityMap:
    """Full-resolution disparity as a convex combination of 3x3 coarse neighbors, times 4.

    Border neighborhoods use replicate padding. Neighbor ``j`` of the weight
    tensor is offset ``(j // 3 - 1, j % 3 - 1)`` from the coarse pixel.
    """
    if disp.scale != 4:
        raise ConfigError(f"convex upsampling takes a quarter-resolution map, got scale {disp.scale}")
    coarse = disp.values
    b, h, w = coarse.shape
    f = UPSAMPLE_FACTOR
    if tuple(weights.shape) != (b, NEIGHBORS, f, f, h, w):
        raise ShapeMismatch(f"weights {tuple(weights.shape)} do not match disparity {(b, h, w)}")
    sums = weights.sum(dim=1)
    if (weights < 0).any() or not torch.allclose(sums, torch.ones_like(sums), atol=WEIGHT_SUM_TOLERANCE):
        raise WeightNormalizationError("upsampling weights must be non-negative and sum to 1 over 9 neighbors")
    padded = F.pad(coarse.unsqueeze(1), (1, 1, 1, 1), mode="replicate")
    neighbors = F.unfold(padded, kernel_size=3).view(b, NEIGHBORS, 1, 1, h, w)
    up = (weights * neighbors).sum(dim=1)
    up = up.permute(0, 3, 1, 4, 2).reshape(b, f * h, f * w)
    return DisparityMap(f * up, scale=1)
