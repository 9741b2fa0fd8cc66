"""EfficientNetV2-B2 feature extractor (fused + squeeze-excite MBConv stack)."""

from __future__ import annotations

import torch
from torch import nn

# (block, kernel, stride, expand, out_channels, repeats, se_ratio) per stage,
# with the B2 width/depth scaling already applied.
_B2_STAGES = (
    ("fused", 3, 1, 1, 16, 2, None),
    ("fused", 3, 2, 4, 32, 3, None),
    ("fused", 3, 2, 4, 56, 3, None),
    ("mb", 3, 2, 4, 104, 4, 0.25),
    ("mb", 3, 1, 6, 120, 6, 0.25),
    ("mb", 3, 2, 6, 208, 10, 0.25),
)
_B2_STEM = 32
_B2_FEATURES = 1408


class ConvBNAct(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 groups: int = 1, act: bool = True):
        layers = [
            nn.Conv2d(in_ch, out_ch, kernel, stride, kernel // 2, groups=groups, bias=False),
            nn.BatchNorm2d(out_ch),
        ]
        if act:
            layers.append(nn.SiLU(inplace=True))
        super().__init__(*layers)


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, rd_channels: int):
        super().__init__()
        self.reduce = nn.Conv2d(channels, rd_channels, 1)
        self.act = nn.SiLU(inplace=True)
        self.expand = nn.Conv2d(rd_channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scale = x.mean((2, 3), keepdim=True)
        scale = self.expand(self.act(self.reduce(scale)))
        return x * torch.sigmoid(scale)


class FusedMBConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, expand: int):
        super().__init__()
        self.use_residual = stride == 1 and in_ch == out_ch
        mid = in_ch * expand
        if expand == 1:
            self.conv = nn.Sequential(ConvBNAct(in_ch, out_ch, kernel, stride))
        else:
            self.conv = nn.Sequential(
                ConvBNAct(in_ch, mid, kernel, stride),
                ConvBNAct(mid, out_ch, 1, act=False),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv(x)
        return x + out if self.use_residual else out


class MBConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, expand: int,
                 se_ratio: float):
        super().__init__()
        self.use_residual = stride == 1 and in_ch == out_ch
        mid = in_ch * expand
        self.conv = nn.Sequential(
            ConvBNAct(in_ch, mid, 1),
            ConvBNAct(mid, mid, kernel, stride, groups=mid),
            SqueezeExcite(mid, max(1, int(in_ch * se_ratio))),
            ConvBNAct(mid, out_ch, 1, act=False),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv(x)
        return x + out if self.use_residual else out


class EfficientNetV2B2(nn.Module):
    """Pooled-feature trunk; forward returns (batch, 1408)."""

    num_features = _B2_FEATURES

    def __init__(self):
        super().__init__()
        self.stem = ConvBNAct(3, _B2_STEM, 3, 2)
        stages = []
        in_ch = _B2_STEM
        for block, kernel, stride, expand, out_ch, repeats, se_ratio in _B2_STAGES:
            layers = []
            for i in range(repeats):
                s = stride if i == 0 else 1
                if block == "fused":
                    layers.append(FusedMBConv(in_ch, out_ch, kernel, s, expand))
                else:
                    layers.append(MBConv(in_ch, out_ch, kernel, s, expand, se_ratio))
                in_ch = out_ch
            stages.append(nn.Sequential(*layers))
        self.stages = nn.Sequential(*stages)
        self.head = ConvBNAct(in_ch, _B2_FEATURES, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.head(self.stages(self.stem(x)))
        return x.mean((2, 3))
