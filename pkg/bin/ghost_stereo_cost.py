"""Group-wise correlation volume and the context enhancement applied to it."""

from __future__ import annotations

import torch
import torch.nn as nn

from ghost_stereo_blocks import ConvBN
from ghost_stereo_types import CostVolume, GroupDivisibilityError, ModelConfig, ShapeMismatch

GROUP_NORM_EPS = 1e-6


def group_normalize(feat: torch.Tensor, num_groups: int, eps: float = GROUP_NORM_EPS) -> torch.Tensor:
    """Divide every per-group channel vector by its L2 norm (+ eps)."""
    b, c, h, w = feat.shape
    if c % num_groups:
        raise GroupDivisibilityError(f"{num_groups} groups do not divide {c} channels")
    grouped = feat.view(b, num_groups, c // num_groups, h, w)
    grouped = grouped / (grouped.norm(dim=2, keepdim=True) + eps)
    return grouped.view(b, c, h, w)


def groupwise_correlation(fea1: torch.Tensor, fea2: torch.Tensor, num_groups: int) -> torch.Tensor:
    b, c, h, w = fea1.shape
    # (G / C) * sum over a group == mean over the group's channels
    return (fea1 * fea2).view(b, num_groups, c // num_groups, h, w).mean(dim=2)


def build_gwc_volume(
    f_left: torch.Tensor,
    f_right: torch.Tensor,
    num_groups: int,
    disparity_levels: int,
    *,
    normalize: bool = True,
) -> CostVolume:
    """``C(g, d, y, x) = (G/C) <f_L^g(y, x), f_R^g(y, x - d)>``, zero where ``x < d``."""
    if f_left.shape != f_right.shape:
        raise ShapeMismatch(f"left {tuple(f_left.shape)} and right {tuple(f_right.shape)} features differ")
    b, c, h, w = f_left.shape
    if num_groups <= 0 or c % num_groups:
        raise GroupDivisibilityError(f"{num_groups} groups do not divide {c} feature channels")
    if normalize:
        f_left = group_normalize(f_left, num_groups)
        f_right = group_normalize(f_right, num_groups)
    volume = f_left.new_zeros([b, num_groups, disparity_levels, h, w])
    for d in range(disparity_levels):
        if d >= w:
            break
        if d > 0:
            volume[:, :, d, :, d:] = groupwise_correlation(f_left[:, :, :, d:], f_right[:, :, :, :-d], num_groups)
        else:
            volume[:, :, d] = groupwise_correlation(f_left, f_right, num_groups)
    return CostVolume(volume.contiguous(), num_groups)


def apply_context_attention(volume: torch.Tensor, attention: torch.Tensor) -> torch.Tensor:
    """Broadcast a per-pixel ``[B, G, H, W]`` attention over the disparity axis."""
    if attention.shape[1] != volume.shape[1]:
        raise ShapeMismatch(f"attention has {attention.shape[1]} channels, volume has {volume.shape[1]}")
    if attention.shape[-2:] != volume.shape[-2:]:
        raise ShapeMismatch("attention and volume differ spatially")
    return volume * attention.unsqueeze(2)


class GhostCVE(nn.Module):
    """Preprocess conv, optional left-feature attention, 1x5x5 post-process conv.

    With ``use_cve`` off only the 3x3x3 preprocessing conv runs.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        g, cf = config.num_groups, config.fused_channels
        self.num_groups = g
        self.use_cve = config.use_cve
        self.pre = ConvBN(g, g, 3, dims=3)
        if self.use_cve:
            self.f2d = nn.Sequential(
                nn.Conv2d(cf, cf // 2, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(cf // 2, g, 3, padding=1),
            )
            self.post = ConvBN(g, g, (1, 5, 5), padding=(0, 2, 2), dims=3)
        else:
            self.f2d = None
            self.post = None

    def forward(self, volume: CostVolume, f_left: torch.Tensor) -> CostVolume:
        if volume.channels != self.num_groups:
            raise ShapeMismatch(f"volume has {volume.channels} channels, expected {self.num_groups}")
        x = self.pre(volume.values)
        if self.use_cve:
            x = apply_context_attention(x, self.f2d(f_left))
            x = self.post(x)
        return CostVolume(x, self.num_groups)
