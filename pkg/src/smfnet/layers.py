"""Building blocks shared by the encoder, fusion layers and decoder."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

_SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.t().contiguous()


def sobel_gradient(x: torch.Tensor) -> torch.Tensor:
    """Per-channel Sobel magnitude ``|g_x| + |g_y|`` with reflect padding."""
    c = x.shape[1]
    xp = F.pad(x, (1, 1, 1, 1), mode="reflect")
    out = None
    for k in (_SOBEL_X, _SOBEL_Y):
        weight = k.to(dtype=x.dtype, device=x.device).expand(c, 1, 3, 3)
        g = F.conv2d(xp, weight, groups=c).abs()
        out = g if out is None else out + g
    return out


def smooth_clamp(x: torch.Tensor, bound: float) -> torch.Tensor:
    """Differentiable clamp to ``(-bound, bound)``."""
    return bound * torch.tanh(x / bound)


def clamped_exp(x: torch.Tensor, bound: float, gain=1.0) -> torch.Tensor:
    """``exp(smooth_clamp(gain * x, bound))`` with the scalar factors folded together."""
    return torch.exp(torch.tanh(x * (gain / bound)) * bound)


# Feature maps flow through the network in channels_last memory format, so the
# ``B x H x W x C`` token view below is free and pointwise work runs as GEMMs.


def tokens(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


def from_tokens(t: torch.Tensor) -> torch.Tensor:
    return t.permute(0, 3, 1, 2)


def pointwise(conv: nn.Conv2d, x: torch.Tensor) -> torch.Tensor:
    """Apply a 1x1 convolution as a linear map over channels."""
    return from_tokens(F.linear(tokens(x), conv.weight.flatten(1), conv.bias))


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of a ``B x C x H x W`` map."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        y = F.layer_norm(tokens(x), (x.shape[1],), self.weight, self.bias, self.eps)
        return from_tokens(y)


def channel_attention(q, k, v, heads: int, temperature: torch.Tensor):
    """Transposed (channel x channel) attention.

    ``q``, ``k``, ``v`` are ``B x C x H x W``; each head attends over its
    ``C/heads`` channels, so the map size does not depend on ``H x W``.
    Queries and keys are L2-normalised over pixels and the logits divided by
    the per-head temperature before a softmax over the key channels.
    Returns the output map and the per-head attention ``B x heads x c x c``.
    """
    b, ch, h, w = q.shape
    c = ch // heads
    # One C x C Gram per sample, then keep the per-head diagonal blocks; this
    # avoids copying the strided per-head views that a batched matmul would need.
    qt, kt, vt = (tokens(t).reshape(b, h * w, ch) for t in (q, k, v))
    gram = qt.transpose(1, 2) @ kt
    q_sq = torch.diagonal(qt.transpose(1, 2) @ qt, dim1=1, dim2=2)
    k_sq = torch.diagonal(kt.transpose(1, 2) @ kt, dim1=1, dim2=2)

    def blocks(m):  # b, C, C -> b, head, c, c
        return torch.diagonal(m.view(b, heads, c, heads, c), dim1=1, dim2=3).permute(0, 3, 1, 2)

    q_norm = q_sq.clamp_min(1e-24).sqrt().view(b, heads, c, 1)
    k_norm = k_sq.clamp_min(1e-24).sqrt().view(b, heads, 1, c)
    attn = (blocks(gram) / (q_norm * k_norm) / temperature).softmax(dim=-1)
    eye = torch.eye(heads, dtype=attn.dtype, device=attn.device)
    full = torch.einsum("bhij,hk->bhikj", attn, eye).reshape(b, ch, ch)
    out = vt @ full.transpose(1, 2)
    return from_tokens(out.view(b, h, w, ch)), attn


class MDTA(nn.Module):
    """Multi-Dconv head transposed attention."""

    def __init__(self, dim: int, heads: int = 8, bias: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads ({heads}) must divide channels ({dim})")
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(dim, dim * 3, 1, bias=bias)
        self.qkv_dwconv = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3, bias=bias)
        self.project_out = nn.Conv2d(dim, dim, 1, bias=bias)
        self.record_attention = False
        self.last_attention = None

    def forward(self, x):
        q, k, v = self.qkv_dwconv(pointwise(self.qkv, x)).chunk(3, dim=1)
        out, attn = channel_attention(q, k, v, self.heads, self.temperature)
        if self.record_attention:
            self.last_attention = attn.detach()
        return pointwise(self.project_out, out)


class LeFF(nn.Module):
    """Feed-forward with a depthwise 3x3 between the pointwise layers."""

    def __init__(self, dim: int, expansion: float = 2.0, bias: bool = False):
        super().__init__()
        hidden = int(dim * expansion)
        self.project_in = nn.Conv2d(dim, hidden, 1, bias=bias)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden, bias=bias)
        self.project_out = nn.Conv2d(hidden, dim, 1, bias=bias)

    def forward(self, x):
        return pointwise(self.project_out, F.gelu(self.dwconv(pointwise(self.project_in, x))))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int = 64, heads: int = 8, ffn_expansion: float = 2.0, bias: bool = False):
        super().__init__()
        self.norm1 = LayerNorm2d(dim)
        self.attn = MDTA(dim, heads, bias)
        self.norm2 = LayerNorm2d(dim)
        self.ffn = LeFF(dim, ffn_expansion, bias)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class BottleneckBlock(nn.Module):
    """The coupling sub-network: pointwise reduce, depthwise 3x3, pointwise expand.

    The last layer starts at zero so a fresh coupling is the identity map.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 32):
        super().__init__()
        self.reduce = nn.Conv2d(in_dim, hidden, 1)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.expand = nn.Conv2d(hidden, out_dim, 1)
        nn.init.zeros_(self.expand.weight)
        nn.init.zeros_(self.expand.bias)

    def forward(self, x):
        return pointwise(self.expand, F.gelu(self.dwconv(F.gelu(pointwise(self.reduce, x)))))
