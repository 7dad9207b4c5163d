"""Hourglass cost aggregation with context-geometry fusion.

Encoder: three stride-2 blocks (volume scale 1/2, 1/4, 1/8; each halves D, H
and W). Decoder, deepest level first: CGF with the matching decoder context
feature, transposed 3D conv (kernel 4, stride 2), additive skip, stride-1
block. A pointwise conv maps the quarter-resolution result to one score
channel.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from ghost_stereo_blocks import Composite, ConvBN, GhostBottleneck, VanillaBlock
from ghost_stereo_types import CostVolume, ModelConfig, ShapeError, ShapeMismatch

HOURGLASS_DEPTH = 3


class ContextGeometryFusion(nn.Module):
    """``out = sigmoid(conv1x1x1(geometry) + U(conv1x1(context))) * geometry``."""

    def __init__(self, volume_channels: int, context_channels: int):
        super().__init__()
        self.geometry = nn.Conv3d(volume_channels, volume_channels, 1)
        self.context = nn.Conv2d(context_channels, volume_channels, 1)

    def attention(self, geometry: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if geometry.shape[-2:] != context.shape[-2:]:
            raise ShapeMismatch(
                f"context {tuple(context.shape[-2:])} does not match volume {tuple(geometry.shape[-2:])}"
            )
        return self.geometry(geometry) + self.context(context).unsqueeze(2)

    def forward(self, geometry: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.attention(geometry, context)) * geometry


def cgf_fuse(geometry: torch.Tensor, context: torch.Tensor, module: ContextGeometryFusion) -> torch.Tensor:
    return module(geometry, context)


class GhostCVA(nn.Module):
    def __init__(self, config: ModelConfig, context_channels: Sequence[int]):
        """``context_channels``: decoder widths at 1/8, 1/16, 1/32 of the image."""
        super().__init__()
        c = tuple(config.aggregation_channels)
        ctx = tuple(context_channels)
        self.use_cva = config.use_cva
        self.channels = c

        def block(cin: int, cout: int, stride: int) -> nn.Module:
            if not config.use_cva:
                return VanillaBlock(cin, cout, stride)
            return GhostBottleneck(
                cin, cin * config.bottleneck_expansion, cout, stride,
                use_se=config.use_se, ratio=config.ghost_ratio, cheap_kernel=config.cheap_kernel,
                se_reduction=config.se_reduction, dims=3,
            )

        self.down = nn.ModuleList([block(c[i], c[i + 1], 2) for i in range(HOURGLASS_DEPTH)])
        # decoder modules are indexed by the level they produce (0 = quarter res)
        self.cgf = nn.ModuleList([ContextGeometryFusion(c[i + 1], ctx[i]) for i in range(HOURGLASS_DEPTH)])
        self.up = nn.ModuleList([
            ConvBN(c[i + 1], c[i], 4, stride=2, padding=1, dims=3, transposed=True)
            for i in range(HOURGLASS_DEPTH)
        ])
        self.refine = nn.ModuleList([block(c[i], c[i], 1) for i in range(HOURGLASS_DEPTH)])
        self.score = nn.Conv3d(c[0], 1, 1)

    def encoder_spec(self) -> Composite:
        return Composite("ghost_cva_encoder" if self.use_cva else "vanilla_encoder",
                         tuple(m.spec for m in self.down))

    def forward(self, volume: CostVolume, context: Sequence[torch.Tensor]) -> torch.Tensor:
        x = volume.values
        if x.shape[1] != self.channels[0]:
            raise ShapeMismatch(f"volume has {x.shape[1]} channels, hourglass expects {self.channels[0]}")
        scale = 2 ** HOURGLASS_DEPTH
        if any(s % scale for s in x.shape[2:]):
            raise ShapeError(f"volume dims {tuple(x.shape[2:])} must be divisible by {scale}")
        if len(context) != HOURGLASS_DEPTH:
            raise ShapeMismatch(f"expected {HOURGLASS_DEPTH} context features, got {len(context)}")

        skips = [x]
        for down in self.down:
            skips.append(down(skips[-1]))

        y = skips[-1]
        for level in reversed(range(HOURGLASS_DEPTH)):
            y = self.cgf[level](y, context[level])
            y = self.up[level](y) + skips[level]
            y = self.refine[level](y)
        return self.score(y).squeeze(1)
