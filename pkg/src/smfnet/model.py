"""The full three-branch encoder / fusion / decoder network."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .encoder import BFEModule, BfeConfig, CAIBlock, CaiConfig, ShallowFeatureExtractor
from .fusion import BaseFusion, Decoder, DetailFusion, GraphFusion
from .graph import GraphReasoning, GrConfig


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 8
    cai: CaiConfig = field(default_factory=CaiConfig)
    bfe: BfeConfig = field(default_factory=BfeConfig)
    gr: GrConfig = field(default_factory=GrConfig)
    use_graph: bool = True
    aggregate: str = "add"
    detail_layers: int = 2
    swap_fusion_layers: bool = False

    @property
    def size_multiple(self) -> int:
        return self.gr.size_multiple if self.use_graph else 1


@dataclass
class FeatureTriplet:
    detail: torch.Tensor
    base: torch.Tensor
    graph: torch.Tensor | None = None

    def streams(self) -> tuple[torch.Tensor, ...]:
        if self.graph is None:
            return (self.detail, self.base)
        return (self.detail, self.base, self.graph)


class FusionLayers(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.swap = cfg.swap_fusion_layers
        self.detail = DetailFusion(cfg.dim, cfg.detail_layers, cfg.cai.exp_clamp)
        self.base = BaseFusion(cfg.dim, cfg.heads)
        self.graph = GraphFusion(cfg.dim) if cfg.use_graph else None

    def forward(self, tv: FeatureTriplet, ti: FeatureTriplet) -> FeatureTriplet:
        if self.swap:
            detail = self.base(tv.detail, ti.detail)
            base = self.detail(tv.base, ti.base)
        else:
            detail = self.detail(tv.detail, ti.detail)
            base = self.base(tv.base, ti.base)
        graph = self.graph(tv.graph, ti.graph) if self.graph is not None else None
        return FeatureTriplet(detail, base, graph)


class SMFNet(nn.Module):
    """Shared-weight two-stream encoder, optional fusion layers, shared decoder.

    The fusion layers are created by :meth:`add_fusion_layers` when stage II
    starts (or at construction for a single joint stage).
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), with_fusion: bool = False):
        super().__init__()
        self.cfg = cfg
        self.sfe = ShallowFeatureExtractor(1, cfg.dim, cfg.heads)
        self.cai = CAIBlock(cfg.cai)
        self.bfe = BFEModule(cfg.dim, cfg.bfe)
        self.gr = GraphReasoning(cfg.dim, cfg.gr) if cfg.use_graph else None
        self.decoder = Decoder(cfg.dim, 3 if cfg.use_graph else 2, cfg.aggregate, cfg.heads)
        self.fusion = None
        if with_fusion:
            self.add_fusion_layers()

    @property
    def has_fusion(self) -> bool:
        return self.fusion is not None

    def add_fusion_layers(self) -> None:
        if self.fusion is None:
            self.fusion = FusionLayers(self.cfg)

    def encode(self, vis, ir) -> tuple[FeatureTriplet, FeatureTriplet]:
        if vis.shape != ir.shape:
            raise ValueError(f"visible/infrared shapes differ: {tuple(vis.shape)} vs {tuple(ir.shape)}")
        m = self.cfg.size_multiple
        if vis.shape[-2] % m or vis.shape[-1] % m:
            raise ValueError(f"spatial dims {tuple(vis.shape[-2:])} must be multiples of {m}")
        b = vis.shape[0]
        shallow = self.sfe(torch.cat([vis, ir], dim=0))
        detail = self.cai(shallow)
        base = self.bfe(shallow)
        s_v, s_i = shallow[:b], shallow[b:]
        g_v = g_i = None
        if self.gr is not None:
            g_v, g_i = self.gr(s_v, s_i)
        return (
            FeatureTriplet(detail[:b], base[:b], g_v),
            FeatureTriplet(detail[b:], base[b:], g_i),
        )

    def decode(self, t: FeatureTriplet):
        return self.decoder(*t.streams())

    def forward_stage1(self, vis, ir):
        tv, ti = self.encode(vis, ir)
        b = vis.shape[0]
        both = FeatureTriplet(
            torch.cat([tv.detail, ti.detail]),
            torch.cat([tv.base, ti.base]),
            None if tv.graph is None else torch.cat([tv.graph, ti.graph]),
        )
        recon = self.decode(both)
        return recon[:b], recon[b:], (tv, ti)

    def forward_stage2(self, vis, ir):
        if self.fusion is None:
            raise RuntimeError("fusion layers missing: this model has only been trained for reconstruction")
        tv, ti = self.encode(vis, ir)
        return self.decode(self.fusion(tv, ti)), (tv, ti)

    def forward(self, vis, ir):
        return self.forward_stage2(vis, ir)[0]
