"""Graph reasoning branch over multi-scale visible/infrared nodes.

Nodes ``0..n-1`` are the visible scales, ``n..2n-1`` the infrared scales.
Directed edges join different scales of one modality and equal scales of
the two modalities, in both directions (``2 n^2`` edges in total).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import pointwise


@dataclass(frozen=True)
class GrConfig:
    pool_factors: tuple[int, ...] = (2, 4, 8)
    node_factor: int = 4
    rounds: int = 1
    node_channels: int = 64
    gru_kernel: int = 3

    def __post_init__(self):
        if len(self.pool_factors) < 2:
            raise ValueError("graph needs at least two scales")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")

    @property
    def scales(self) -> int:
        return len(self.pool_factors)

    @property
    def size_multiple(self) -> int:
        return max(max(self.pool_factors), self.node_factor)


def neighbours(node: int, n: int) -> list[int]:
    """In-neighbours of ``node``: other scales of its modality, then its cross-modal twin.

    The order is the same for both modalities, so swapping them swaps results exactly.
    """
    modality, scale = divmod(node, n)
    intra = [modality * n + j for j in range(n) if j != scale]
    return intra + [(1 - modality) * n + scale]


def adjacency(n: int) -> list[tuple[int, int]]:
    """Ordered ``(source, target)`` pairs, grouped by target."""
    return [(k, l) for l in range(2 * n) for k in neighbours(l, n)]


def edge_count(n: int) -> int:
    return 2 * n * (n - 1) + 2 * n


@dataclass
class GraphBundle:
    nodes: list[torch.Tensor]
    n: int
    edges: dict[tuple[int, int], torch.Tensor] = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)


class ConvGRU(nn.Module):
    """GRU cell applied convolutionally; hidden state and input share a shape."""

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        self.conv_z = nn.Conv2d(2 * channels, channels, kernel, padding=pad)
        self.conv_r = nn.Conv2d(2 * channels, channels, kernel, padding=pad)
        self.conv_n = nn.Conv2d(2 * channels, channels, kernel, padding=pad)

    def forward(self, hidden, inp):
        hx = torch.cat([inp, hidden], dim=1)
        z = torch.sigmoid(self.conv_z(hx))
        r = torch.sigmoid(self.conv_r(hx))
        cand = torch.tanh(self.conv_n(torch.cat([inp, r * hidden], dim=1)))
        return (1 - z) * hidden + z * cand


class GraphReasoning(nn.Module):
    def __init__(self, dim: int = 64, cfg: GrConfig = GrConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.node_channels
        self.node_convs = nn.ModuleList(nn.Conv2d(dim, c, 3, padding=1) for _ in cfg.pool_factors)
        self.edge_conv = nn.Conv2d(c, c, 3, padding=1)
        self.gru = ConvGRU(c, cfg.gru_kernel)
        self.readout = nn.Conv2d(cfg.scales * c, dim, 1)

    def _embed(self, feat):
        h, w = feat.shape[-2:]
        size = (h // self.cfg.node_factor, w // self.cfg.node_factor)
        nodes = []
        for factor, conv in zip(self.cfg.pool_factors, self.node_convs):
            node = conv(F.avg_pool2d(feat, factor))
            if node.shape[-2:] != size:
                node = F.interpolate(node, size=size, mode="bilinear", align_corners=False)
            nodes.append(node)
        return nodes

    def build_nodes(self, phi_v, phi_i) -> GraphBundle:
        if phi_v.shape != phi_i.shape:
            raise ValueError(f"modality shapes differ: {tuple(phi_v.shape)} vs {tuple(phi_i.shape)}")
        m = self.cfg.size_multiple
        if phi_v.shape[-2] % m or phi_v.shape[-1] % m:
            raise ValueError(f"spatial dims {tuple(phi_v.shape[-2:])} must be multiples of {m}; pad first")
        g = GraphBundle(self._embed(phi_v) + self._embed(phi_i), self.cfg.scales)
        self.refresh_edges(g)
        return g

    def edge_embed(self, v_k, v_l):
        if v_k.shape != v_l.shape:
            raise ValueError(f"node shapes differ: {tuple(v_k.shape)} vs {tuple(v_l.shape)}")
        return self.edge_conv(v_l - v_k)

    def refresh_edges(self, g: GraphBundle) -> None:
        pairs = adjacency(g.n)
        b = g.nodes[0].shape[0]
        diffs = torch.cat([g.nodes[l] - g.nodes[k] for k, l in pairs], dim=0)
        edges = self.edge_conv(diffs).split(b, dim=0)
        g.edges = dict(zip(pairs, edges))

    @staticmethod
    def message_pass(g: GraphBundle) -> list[torch.Tensor]:
        messages = []
        for l in range(g.num_nodes):
            msg = None
            for k in neighbours(l, g.n):
                term = torch.sigmoid(g.edges[(k, l)]) * g.nodes[k]
                msg = term if msg is None else msg + term
            messages.append(msg)
        return messages

    def node_update(self, g: GraphBundle, messages) -> GraphBundle:
        hidden = torch.cat(g.nodes, dim=0)
        new = self.gru(hidden, torch.cat(messages, dim=0)).split(g.nodes[0].shape[0], dim=0)
        return GraphBundle(list(new), g.n)

    def readout_modality(self, nodes, size):
        up = [F.interpolate(v, size=size, mode="bilinear", align_corners=False) for v in nodes]
        return pointwise(self.readout, torch.cat(up, dim=1))

    def forward(self, phi_v, phi_i):
        g = self.build_nodes(phi_v, phi_i)
        for step in range(self.cfg.rounds):
            if step:
                self.refresh_edges(g)
            g = self.node_update(g, self.message_pass(g))
        n = g.n
        size = phi_v.shape[-2:]
        return self.readout_modality(g.nodes[:n], size), self.readout_modality(g.nodes[n:], size)
