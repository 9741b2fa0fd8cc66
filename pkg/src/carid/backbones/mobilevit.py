"""MobileViT-S feature extractor: MobileNetV2 blocks + patch transformers."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .efficientnetv2 import ConvBNAct


class InvertedResidual(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, expand: int = 4):
        super().__init__()
        self.use_residual = stride == 1 and in_ch == out_ch
        mid = in_ch * expand
        self.conv = nn.Sequential(
            ConvBNAct(in_ch, mid, 1),
            ConvBNAct(mid, mid, 3, stride, groups=mid),
            ConvBNAct(mid, out_ch, 1, act=False),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv(x)
        return x + out if self.use_residual else out


class MobileViTBlock(nn.Module):
    """Local conv rep, transformer over unfolded 2x2 patches, conv fusion."""

    def __init__(self, channels: int, dim: int, depth: int, patch: int = 2,
                 heads: int = 4, mlp_ratio: float = 2.0):
        super().__init__()
        self.patch = patch
        self.conv_local = ConvBNAct(channels, channels, 3)
        self.proj_in = nn.Conv2d(channels, dim, 1, bias=False)
        layer = nn.TransformerEncoderLayer(
            d_model=dim, nhead=heads, dim_feedforward=int(dim * mlp_ratio),
            dropout=0.0, activation="gelu", batch_first=True, norm_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.proj_out = ConvBNAct(dim, channels, 1)
        self.fuse = ConvBNAct(2 * channels, channels, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        residual = x
        b, _, h, w = x.shape
        x = self.proj_in(self.conv_local(x))
        d = x.shape[1]

        p = self.patch
        new_h, new_w = math.ceil(h / p) * p, math.ceil(w / p) * p
        resized = (new_h, new_w) != (h, w)
        if resized:
            x = F.interpolate(x, size=(new_h, new_w), mode="bilinear", align_corners=False)

        # (b, d, H, W) -> (b * p*p, H/p * W/p, d): one token sequence per
        # intra-patch offset, shared transformer across offsets.
        gh, gw = new_h // p, new_w // p
        x = x.reshape(b, d, gh, p, gw, p).permute(0, 3, 5, 2, 4, 1)
        x = x.reshape(b * p * p, gh * gw, d)
        x = self.norm(self.transformer(x))
        x = x.reshape(b, p, p, gh, gw, d).permute(0, 5, 3, 1, 4, 2)
        x = x.reshape(b, d, new_h, new_w)

        if resized:
            x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        x = self.proj_out(x)
        return self.fuse(torch.cat([residual, x], dim=1))


class MobileViTS(nn.Module):
    """Pooled-feature trunk; forward returns (batch, 640)."""

    num_features = 640

    def __init__(self):
        super().__init__()
        self.stem = ConvBNAct(3, 16, 3, 2)
        self.stages = nn.Sequential(
            nn.Sequential(InvertedResidual(16, 32, 1)),
            nn.Sequential(
                InvertedResidual(32, 64, 2),
                InvertedResidual(64, 64, 1),
                InvertedResidual(64, 64, 1),
            ),
            nn.Sequential(
                InvertedResidual(64, 96, 2),
                MobileViTBlock(96, dim=144, depth=2),
            ),
            nn.Sequential(
                InvertedResidual(96, 128, 2),
                MobileViTBlock(128, dim=192, depth=4),
            ),
            nn.Sequential(
                InvertedResidual(128, 160, 2),
                MobileViTBlock(160, dim=240, depth=3),
            ),
        )
        self.head = ConvBNAct(160, self.num_features, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.head(self.stages(self.stem(x)))
        return x.mean((2, 3))
