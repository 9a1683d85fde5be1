"""Shallow feature extraction, the detail branch (CAI) and the base branch (BFE)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (
    BottleneckBlock,
    LayerNorm2d,
    TransformerBlock,
    pointwise,
    channel_attention,
    clamped_exp,
    sobel_gradient,
)


@dataclass(frozen=True)
class CaiConfig:
    total_channels: int = 64
    split: int = 32
    heads: int = 8
    exp_clamp: float = 5.0
    dense_layers: int = 3
    growth: int = 32
    bottleneck: int = 32
    cross_attention: bool = True  # False: plain coupling on the stem output

    def __post_init__(self):
        if not 0 < self.split < self.total_channels:
            raise ValueError(f"split must lie in (0, {self.total_channels}), got {self.split}")
        if self.split % self.heads or (self.total_channels - self.split) % self.heads:
            raise ValueError("heads must divide both channel halves")
        if self.cross_attention and self.split != self.total_channels - self.split:
            raise ValueError("cross attention needs equal halves")
        if self.exp_clamp <= 0:
            raise ValueError("exp_clamp must be positive")


@dataclass(frozen=True)
class BfeConfig:
    blocks_per_group: int = 2
    groups: int = 2
    ffn_expansion: float = 2.0
    heads: int = 8
    residual: bool = True


class ShallowFeatureExtractor(nn.Module):
    """3x3 convolution lifting one channel to ``dim``, then a transformer block."""

    def __init__(self, in_channels: int = 1, dim: int = 64, heads: int = 8):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, dim, 3, padding=1, padding_mode="reflect")
        self.transformer = TransformerBlock(dim, heads)

    def forward(self, img):
        if img.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels}-channel input, got {img.shape[1]}")
        x = self.conv(img).contiguous(memory_format=torch.channels_last)
        return self.transformer(x)


class DenseStem(nn.Module):
    """Dense conv stack plus a Sobel branch, each projected pointwise and summed."""

    def __init__(self, dim: int, layers: int = 3, growth: int = 32):
        super().__init__()
        self.layers = nn.ModuleList(
            nn.Conv2d(dim + i * growth, growth, 3, padding=1) for i in range(layers)
        )
        self.dense_proj = nn.Conv2d(dim + layers * growth, dim, 1)
        self.grad_proj = nn.Conv2d(dim, dim, 1)

    def forward(self, x):
        feats = [x]
        for conv in self.layers:
            feats.append(F.gelu(conv(torch.cat(feats, dim=1))))
        return pointwise(self.dense_proj, torch.cat(feats, dim=1)) + pointwise(self.grad_proj, sobel_gradient(x))


class CrossAttention(nn.Module):
    """Each half's values are mixed by attention between its keys and the other half's queries."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = LayerNorm2d(dim)
        self.norm2 = LayerNorm2d(dim)
        self.qkv1 = nn.Conv2d(dim, dim * 3, 1)
        self.qkv2 = nn.Conv2d(dim, dim * 3, 1)
        self.dw1 = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3)
        self.dw2 = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3)
        self.temperature1 = nn.Parameter(torch.ones(heads, 1, 1))
        self.temperature2 = nn.Parameter(torch.ones(heads, 1, 1))
        self.last_attention = None
        self.record_attention = False

    def forward(self, x1, x2):
        q1, k1, v1 = self.dw1(pointwise(self.qkv1, self.norm1(x1))).chunk(3, dim=1)
        q2, k2, v2 = self.dw2(pointwise(self.qkv2, self.norm2(x2))).chunk(3, dim=1)
        f1, a1 = channel_attention(q2, k1, v1, self.heads, self.temperature1)
        f2, a2 = channel_attention(q1, k2, v2, self.heads, self.temperature2)
        if self.record_attention:
            self.last_attention = (a1.detach(), a2.detach())
        return f1, f2


class AffineCoupling(nn.Module):
    """Two-step affine coupling with a closed-form inverse.

    forward:  f1' = f1 * exp(c(s)) + s,  s = scale_net(f2)
              f2' = f2 + shift_net(f1')
    where ``c`` is a smooth clamp to ``(-exp_clamp, exp_clamp)``.
    """

    def __init__(self, dim1: int, dim2: int, hidden: int = 32, exp_clamp: float = 5.0):
        super().__init__()
        self.scale_net = BottleneckBlock(dim2, dim1, hidden)
        self.shift_net = BottleneckBlock(dim1, dim2, hidden)
        self.exp_clamp = exp_clamp

    def forward(self, f1, f2):
        s = self.scale_net(f2)
        f1 = f1 * clamped_exp(s, self.exp_clamp) + s
        f2 = f2 + self.shift_net(f1)
        return f1, f2

    def inverse(self, g1, g2):
        if g1.shape[0] != g2.shape[0] or g1.shape[-2:] != g2.shape[-2:]:
            raise ValueError(f"mismatched halves {tuple(g1.shape)} / {tuple(g2.shape)}")
        f2 = g2 - self.shift_net(g1)
        s = self.scale_net(f2)
        f1 = (g1 - s) * clamped_exp(s, self.exp_clamp, -1.0)
        return f1, f2


def invertible_uncouple(coupling: AffineCoupling, g1, g2):
    """Recover the coupling inputs from its outputs using the same weights."""
    return coupling.inverse(g1, g2)


class CAIBlock(nn.Module):
    """Cross attention and invertible block: the detail branch."""

    def __init__(self, cfg: CaiConfig = CaiConfig()):
        super().__init__()
        self.cfg = cfg
        self.stem = DenseStem(cfg.total_channels, cfg.dense_layers, cfg.growth)
        half1, half2 = cfg.split, cfg.total_channels - cfg.split
        self.cross_attention = CrossAttention(half1, cfg.heads) if cfg.cross_attention else None
        self.coupling = AffineCoupling(half1, half2, cfg.bottleneck, cfg.exp_clamp)

    def forward(self, x):
        if x.shape[1] != self.cfg.total_channels:
            raise ValueError(f"CAI expects {self.cfg.total_channels} channels, got {x.shape[1]}")
        feat = self.stem(x)
        f1, f2 = feat[:, : self.cfg.split], feat[:, self.cfg.split :]
        if self.cross_attention is not None:
            f1, f2 = self.cross_attention(f1, f2)
        f1, f2 = self.coupling(f1, f2)
        return torch.cat([f1, f2], dim=1)


class BFEModule(nn.Module):
    """Base branch: residual groups ``x + Conv(rho(rho(x)))`` of transformer blocks."""

    def __init__(self, dim: int = 64, cfg: BfeConfig = BfeConfig()):
        super().__init__()
        self.cfg = cfg
        self.groups = nn.ModuleList(
            nn.ModuleDict(
                {
                    "blocks": nn.Sequential(
                        *(TransformerBlock(dim, cfg.heads, cfg.ffn_expansion) for _ in range(cfg.blocks_per_group))
                    ),
                    "conv": nn.Conv2d(dim, dim, 3, padding=1),
                }
            )
            for _ in range(cfg.groups)
        )

    def forward(self, x):
        for group in self.groups:
            y = group["conv"](group["blocks"](x))
            x = x + y if self.cfg.residual else y
        return x

    def attention_modules(self):
        return [blk.attn for g in self.groups for blk in g["blocks"]]
