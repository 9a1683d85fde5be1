"""Stage-II fusion layers and the shared decoder."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import BottleneckBlock, TransformerBlock, clamped_exp, pointwise


class DetailFusionLayer(nn.Module):
    """One cross-modal affine mixing step.

    out1 = (x1 - p(x2)) * exp(-a * p(x2)),  out2 = (x2 - q(x1)) * exp(-a * q(x1))
    """

    def __init__(self, dim: int, hidden: int = 32, exp_clamp: float = 5.0, share_psi: bool = False):
        super().__init__()
        self.psi1 = BottleneckBlock(dim, dim, hidden)
        self.psi2 = self.psi1 if share_psi else BottleneckBlock(dim, dim, hidden)
        self.a = nn.Parameter(torch.tensor(1.0))
        self.exp_clamp = exp_clamp

    def forward(self, x1, x2):
        p, q = self.psi1(x2), self.psi2(x1)
        out1 = (x1 - p) * clamped_exp(p, self.exp_clamp, -self.a)
        out2 = (x2 - q) * clamped_exp(q, self.exp_clamp, -self.a)
        return out1, out2


class DetailFusion(nn.Module):
    def __init__(self, dim: int = 64, layers: int = 2, exp_clamp: float = 5.0,
                 share_psi: bool = False, alternate: bool = True):
        super().__init__()
        if layers < 1:
            raise ValueError("detail fusion needs at least one layer")
        self.layers = nn.ModuleList(
            DetailFusionLayer(dim, exp_clamp=exp_clamp, share_psi=share_psi) for _ in range(layers)
        )
        self.alternate = alternate
        kept = min(layers, 2)
        self.project = nn.Conv2d(kept * 2 * dim, dim, 1)

    def forward_layers(self, phi_v, phi_i):
        """Per-layer ``(out1, out2)`` pairs before projection."""
        if phi_v.shape != phi_i.shape:
            raise ValueError(f"shape mismatch {tuple(phi_v.shape)} / {tuple(phi_i.shape)}")
        outs = []
        x1, x2 = phi_v, phi_i
        for layer in self.layers:
            o1, o2 = layer(x1, x2)
            outs.append((o1, o2))
            x1, x2 = (o2, o1) if self.alternate else (o1, o2)
        return outs

    def forward(self, phi_v, phi_i):
        outs = self.forward_layers(phi_v, phi_i)[-2:]
        return pointwise(self.project, torch.cat([t for pair in outs for t in pair], dim=1))


class BaseFusion(nn.Module):
    def __init__(self, dim: int = 64, heads: int = 8):
        super().__init__()
        self.transformer = TransformerBlock(dim, heads)

    def forward(self, phi_v, phi_i):
        if phi_v.shape != phi_i.shape:
            raise ValueError(f"shape mismatch {tuple(phi_v.shape)} / {tuple(phi_i.shape)}")
        return self.transformer(phi_v + phi_i)


class GraphFusion(nn.Module):
    def __init__(self, dim: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(2 * dim, dim, 1)

    def forward(self, phi_v, phi_i):
        if phi_v.shape != phi_i.shape:
            raise ValueError(f"shape mismatch {tuple(phi_v.shape)} / {tuple(phi_i.shape)}")
        return pointwise(self.conv, torch.cat([phi_v, phi_i], dim=1))


class DepthwiseSeparable(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.depthwise = nn.Conv2d(in_dim, in_dim, 3, padding=1, groups=in_dim, padding_mode="reflect")
        self.pointwise = nn.Conv2d(in_dim, out_dim, 1)

    def forward(self, x):
        return pointwise(self.pointwise, self.depthwise(x))


class Decoder(nn.Module):
    """Aggregate the feature streams, then transformer -> 3 depthwise convs -> sigmoid."""

    def __init__(self, dim: int = 64, streams: int = 3, aggregate: str = "add", heads: int = 8):
        super().__init__()
        if aggregate not in ("add", "concat"):
            raise ValueError(f"unknown aggregate mode {aggregate!r}")
        self.streams = streams
        self.aggregate = aggregate
        self.in_channels = dim * streams if aggregate == "concat" else dim
        self.reduce = nn.Conv2d(self.in_channels, dim, 1) if aggregate == "concat" else None
        self.transformer = TransformerBlock(dim, heads)
        self.conv1 = DepthwiseSeparable(dim, dim)
        self.conv2 = DepthwiseSeparable(dim, dim)
        self.conv3 = DepthwiseSeparable(dim, 1)

    def forward(self, *feats):
        if len(feats) != self.streams:
            raise ValueError(f"decoder expects {self.streams} streams, got {len(feats)}")
        if self.aggregate == "add":
            x = feats[0]
            for f in feats[1:]:
                x = x + f
        else:
            x = pointwise(self.reduce, torch.cat(feats, dim=1))
        x = self.transformer(x)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return torch.sigmoid(self.conv3(x))
