"""Swin-S3-tiny feature extractor.

Assembled from torchvision's shifted-window blocks with the S3-tiny layout:
embed dim 96, depths (2, 2, 6, 2), heads (3, 6, 12, 24) and the searched
per-stage window sizes (7, 7, 14, 7).
"""

from __future__ import annotations

import torch
from torch import nn
from torchvision.models.swin_transformer import PatchMerging, SwinTransformerBlock

_DEPTHS = (2, 2, 6, 2)
_HEADS = (3, 6, 12, 24)
_WINDOWS = (7, 7, 14, 7)
_EMBED = 96


class SwinS3Tiny(nn.Module):
    """Pooled-feature trunk; forward returns (batch, 768)."""

    num_features = _EMBED * 2 ** (len(_DEPTHS) - 1)

    def __init__(self):
        super().__init__()
        self.patch_embed = nn.Conv2d(3, _EMBED, kernel_size=4, stride=4)
        self.embed_norm = nn.LayerNorm(_EMBED)
        stages = []
        dim = _EMBED
        for i, (depth, heads, window) in enumerate(zip(_DEPTHS, _HEADS, _WINDOWS)):
            layers: list[nn.Module] = []
            if i > 0:
                layers.append(PatchMerging(dim, norm_layer=nn.LayerNorm))
                dim *= 2
            for j in range(depth):
                shift = [0, 0] if j % 2 == 0 else [window // 2, window // 2]
                layers.append(SwinTransformerBlock(
                    dim, heads, window_size=[window, window], shift_size=shift,
                ))
            stages.append(nn.Sequential(*layers))
        self.stages = nn.Sequential(*stages)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(x).permute(0, 2, 3, 1)  # (B, H, W, C)
        x = self.embed_norm(x)
        x = self.stages(x)
        x = self.norm(x)
        return x.mean((1, 2))
