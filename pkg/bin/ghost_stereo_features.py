"""GhostNet-style U-shaped feature extractor with a shallow bypass branch.

The same ``FeatureExtractor`` instance is applied to the left and the right
image (Siamese weights).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn

from ghost_stereo_blocks import ConvBN, GhostBottleneck
from ghost_stereo_types import ConfigError, ModelConfig, ShapeError, ShapeMismatch

ENCODER_STRIDE = 32


@dataclass
class FeatureBundle:
    encoder: list[torch.Tensor]
    decoder: list[torch.Tensor]
    bypass: torch.Tensor
    fused: torch.Tensor

    @property
    def context(self) -> list[torch.Tensor]:
        """Decoder features at 1/8, 1/16 and 1/32 (consumed by CGF)."""
        return self.decoder[1:]


class GhostEncoder(nn.Module):
    """Stem (1/2) followed by four stride-2 Ghost bottleneck stages (1/4 .. 1/32)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.channels = tuple(config.feature_channels)
        self.stem = ConvBN(3, config.stem_channels, 3, stride=2)
        stages = []
        prev = config.stem_channels
        for out in self.channels:
            mid = out * config.encoder_expansion
            kw = dict(use_se=config.use_se, ratio=config.ghost_ratio, cheap_kernel=config.cheap_kernel,
                      se_reduction=config.se_reduction, dims=2)
            stages.append(nn.Sequential(
                GhostBottleneck(prev, mid, out, stride=2, **kw),
                GhostBottleneck(out, mid, out, stride=1, **kw),
            ))
            prev = out
        self.stages = nn.ModuleList(stages)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        h, w = image.shape[-2:]
        if h % ENCODER_STRIDE or w % ENCODER_STRIDE:
            raise ShapeError(f"image size {h}x{w} must be divisible by {ENCODER_STRIDE}; pad it first")
        x = self.stem(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class UpBlock(nn.Module):
    """Transposed conv (2x) then a conv fusing the same-level encoder skip."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int):
        super().__init__()
        self.skip_channels = skip_channels
        self.up = ConvBN(in_channels, out_channels, 4, stride=2, padding=1, transposed=True)
        self.merge = ConvBN(out_channels + skip_channels, out_channels, 3)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if skip.shape[1] != self.skip_channels:
            raise ShapeMismatch(f"skip has {skip.shape[1]} channels, block built for {self.skip_channels}")
        x = self.up(x)
        if x.shape[-2:] != skip.shape[-2:]:
            raise ShapeMismatch(f"upsampled {tuple(x.shape[-2:])} vs skip {tuple(skip.shape[-2:])}")
        return self.merge(torch.cat([x, skip], dim=1))


class UNetDecoder(nn.Module):
    def __init__(self, encoder_channels: Sequence[int], decoder_channels: Sequence[int]):
        super().__init__()
        enc, dec = tuple(encoder_channels), tuple(decoder_channels)
        if len(enc) != 4 or len(dec) != 4:
            raise ConfigError("decoder needs four encoder and four decoder widths")
        if dec[3] != enc[3]:
            raise ConfigError(f"decoder input width {dec[3]} does not match the 1/32 encoder width {enc[3]}")
        self.up16 = UpBlock(dec[3], enc[2], dec[2])
        self.up8 = UpBlock(dec[2], enc[1], dec[1])
        self.up4 = UpBlock(dec[1], enc[0], dec[0])

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        f4, f8, f16, f32 = feats
        d16 = self.up16(f32, f16)
        d8 = self.up8(d16, f8)
        d4 = self.up4(d8, f4)
        return [d4, d8, d16, f32]


class BypassNet(nn.Module):
    """Two blocks of two convolutions; the first conv of each block has stride 2."""

    def __init__(self, out_channels: int):
        super().__init__()
        half = max(out_channels // 2, 1)
        self.block1 = nn.Sequential(ConvBN(3, half, 3, stride=2), ConvBN(half, half, 3))
        self.block2 = nn.Sequential(ConvBN(half, out_channels, 3, stride=2), ConvBN(out_channels, out_channels, 3))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.block2(self.block1(image))


class FeatureFusion(nn.Module):
    """Concatenate decoder 1/4 and bypass features, project to C_f descriptors."""

    def __init__(self, decoder_channels: int, bypass_channels: int, fused_channels: int):
        super().__init__()
        self.conv = ConvBN(decoder_channels + bypass_channels, fused_channels, 3, relu=False)

    def forward(self, decoder4: torch.Tensor, bypass: torch.Tensor) -> torch.Tensor:
        if decoder4.shape[-2:] != bypass.shape[-2:]:
            raise ShapeMismatch(
                f"decoder {tuple(decoder4.shape[-2:])} and bypass {tuple(bypass.shape[-2:])} differ spatially"
            )
        return self.conv(torch.cat([decoder4, bypass], dim=1))


class FeatureExtractor(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.encoder = GhostEncoder(config)
        self.decoder = UNetDecoder(config.feature_channels, config.decoder_widths)
        self.bypass_net = BypassNet(config.bypass_channels)
        self.fusion = FeatureFusion(config.decoder_widths[0], config.bypass_channels, config.fused_channels)

    def encode(self, image: torch.Tensor) -> list[torch.Tensor]:
        return self.encoder(image)

    def decode(self, encoder_feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        return self.decoder(encoder_feats)

    def bypass(self, image: torch.Tensor) -> torch.Tensor:
        return self.bypass_net(image)

    def fuse(self, decoder4: torch.Tensor, bypass_feat: torch.Tensor) -> torch.Tensor:
        return self.fusion(decoder4, bypass_feat)

    def forward(self, image: torch.Tensor) -> FeatureBundle:
        enc = self.encode(image)
        dec = self.decode(enc)
        byp = self.bypass(image)
        return FeatureBundle(encoder=enc, decoder=dec, bypass=byp, fused=self.fuse(dec[0], byp))


def import_encoder_weights(encoder: nn.Module, state_dict: Mapping[str, torch.Tensor]) -> list[str]:
    """Copy every tensor whose name and shape match; return the copied names."""
    own = encoder.state_dict()
    loaded = []
    with torch.no_grad():
        for name, tensor in state_dict.items():
            target = own.get(name)
            if target is None or tuple(target.shape) != tuple(tensor.shape):
                continue
            target.copy_(tensor)
            loaded.append(name)
    return loaded
