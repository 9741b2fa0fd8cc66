"""CoaT-lite mini feature extractor.

Serial stages of factorized conv-attention: attention cost is linear in
token count (softmax over keys, then query times the aggregated key-value
outer product), with depthwise-conv position encodings. A class token per
stage carries the pooled representation; the last stage's class token is
the output feature.
"""

from __future__ import annotations

import torch
from torch import nn

_DIMS = (64, 128, 320, 512)
_DEPTHS = (2, 2, 2, 2)
_HEADS = 8
_MLP_RATIOS = (8, 8, 4, 4)
# Heads split across depthwise kernel sizes for the relative position conv.
_CRPE_WINDOWS = {3: 2, 5: 3, 7: 3}


class ConvPosEnc(nn.Module):
    """Depthwise-conv position encoding added to the image tokens."""

    def __init__(self, dim: int, k: int = 3):
        super().__init__()
        self.proj = nn.Conv2d(dim, dim, k, 1, k // 2, groups=dim)

    def forward(self, x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        b, n, c = x.shape
        h, w = size
        cls_tok, img = x[:, :1], x[:, 1:]
        feat = img.transpose(1, 2).reshape(b, c, h, w)
        img = (self.proj(feat) + feat).flatten(2).transpose(1, 2)
        return torch.cat((cls_tok, img), dim=1)


class ConvRelPosEnc(nn.Module):
    """Per-head-group depthwise convs realizing relative position weights."""

    def __init__(self, head_ch: int, windows: dict[int, int] = _CRPE_WINDOWS):
        super().__init__()
        self.convs = nn.ModuleList()
        self.head_splits = []
        for window, n_heads in windows.items():
            ch = n_heads * head_ch
            self.convs.append(nn.Conv2d(ch, ch, window, 1, window // 2, groups=ch))
            self.head_splits.append(n_heads)
        self.channel_splits = [n * head_ch for n in self.head_splits]

    def forward(self, q: torch.Tensor, v: torch.Tensor,
                size: tuple[int, int]) -> torch.Tensor:
        b, heads, n, ch = q.shape
        h, w = size
        q_img, v_img = q[:, :, 1:], v[:, :, 1:]

        v_img = v_img.transpose(2, 3).reshape(b, heads * ch, h, w)
        chunks = torch.split(v_img, self.channel_splits, dim=1)
        conv_out = torch.cat([conv(chunk) for conv, chunk in zip(self.convs, chunks)], dim=1)
        conv_out = conv_out.reshape(b, heads, ch, h * w).transpose(2, 3)

        ev = q_img * conv_out
        zero = torch.zeros((b, heads, 1, ch), dtype=q.dtype, device=q.device)
        return torch.cat((zero, ev), dim=2)


class FactorAttention(nn.Module):
    def __init__(self, dim: int, heads: int, crpe: ConvRelPosEnc):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)
        self.crpe = crpe

    def forward(self, x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # (b, heads, n, ch)

        k_softmax = k.softmax(dim=2)
        factor_att = q @ (k_softmax.transpose(-2, -1) @ v)
        x = self.scale * factor_att + self.crpe(q, v, size)
        x = x.transpose(1, 2).reshape(b, n, c)
        return self.proj(x)


class SerialBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, cpe: ConvPosEnc,
                 crpe: ConvRelPosEnc):
        super().__init__()
        self.cpe = cpe
        self.norm1 = nn.LayerNorm(dim)
        self.attn = FactorAttention(dim, heads, crpe)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(self, x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        x = self.cpe(x, size)
        x = x + self.attn(self.norm1(x), size)
        return x + self.mlp(self.norm2(x))


class _Stage(nn.Module):
    def __init__(self, in_ch: int, dim: int, depth: int, heads: int, mlp_ratio: int,
                 patch: int):
        super().__init__()
        self.patch_proj = nn.Conv2d(in_ch, dim, patch, patch)
        self.patch_norm = nn.LayerNorm(dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        cpe = ConvPosEnc(dim)
        crpe = ConvRelPosEnc(dim // heads)
        self.blocks = nn.ModuleList(
            [SerialBlock(dim, heads, mlp_ratio, cpe, crpe) for _ in range(depth)]
        )
        nn.init.trunc_normal_(self.cls_token, std=0.02)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.patch_proj(x)
        b, c, h, w = x.shape
        tokens = self.patch_norm(x.flatten(2).transpose(1, 2))
        tokens = torch.cat((self.cls_token.expand(b, -1, -1), tokens), dim=1)
        for block in self.blocks:
            tokens = block(tokens, (h, w))
        cls_tok, img = tokens[:, 0], tokens[:, 1:]
        return img.transpose(1, 2).reshape(b, c, h, w), cls_tok


class CoaTLiteMini(nn.Module):
    """Pooled-feature trunk; forward returns (batch, 512)."""

    num_features = _DIMS[-1]

    def __init__(self):
        super().__init__()
        stages = []
        in_ch = 3
        for i, (dim, depth, ratio) in enumerate(zip(_DIMS, _DEPTHS, _MLP_RATIOS)):
            stages.append(_Stage(in_ch, dim, depth, _HEADS, ratio, patch=4 if i == 0 else 2))
            in_ch = dim
        self.stages = nn.ModuleList(stages)
        self.norm = nn.LayerNorm(_DIMS[-1])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cls_tok = None
        for stage in self.stages:
            x, cls_tok = stage(x)
        return self.norm(cls_tok)
