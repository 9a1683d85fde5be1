"""Shared input builders for tests."""

import torch

from smfnet.encoder import BfeConfig, CaiConfig
from smfnet.graph import GrConfig

MINI_CAI = CaiConfig(total_channels=8, split=4, heads=2, dense_layers=2, growth=4, bottleneck=4)
MINI_BFE = BfeConfig(blocks_per_group=1, groups=2, heads=2)
MINI_GR = GrConfig(node_channels=8)


def ramp_noise(b, c, h, w, seed=0, noise=0.05, dtype=torch.float64):
    """Tilted planes plus noise: Sobel responses stay well away from zero."""
    g = torch.Generator().manual_seed(seed)
    rr = torch.arange(h, dtype=dtype).view(1, 1, h, 1)
    cc = torch.arange(w, dtype=dtype).view(1, 1, 1, w)
    sign = torch.where(torch.rand(b, c, 2, generator=g) < 0.5, -1.0, 1.0).to(dtype)
    slope = (0.3 + 0.7 * torch.rand(b, c, 2, generator=g, dtype=dtype)) * sign
    x = slope[..., 0, None, None] * rr + slope[..., 1, None, None] * cc
    return x / max(h, w) + noise * torch.randn(b, c, h, w, generator=g, dtype=dtype)


def randomise(module, seed=0, scale=0.3):
    """Overwrite every parameter with small random values (undoes zero init)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module
