"""Training objectives for the reconstruction and fusion stages.

All norms are mean-reduced over elements. Images are ``B x 1 x H x W`` in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch
import torch.nn.functional as F

from .layers import sobel_gradient

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
GRAM_PYRAMID = (1, 2, 4, 8)


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 2.0  # stage I decomposition
    beta1: float = 8.0  # SSIM
    beta2: float = 10.0  # gradient
    alpha2: float = 10.0  # stage II gradient
    alpha3: float = 2.0  # stage II decomposition
    delta: float = 1.01
    semantic: bool = True  # Gram term on the infrared reconstruction
    graph_cc_stage1: bool = False
    graph_cc_stage2: bool = True

    def __post_init__(self):
        if self.delta <= 1:
            raise ValueError(f"delta must exceed 1, got {self.delta}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and v < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0, got {v}")


@dataclass
class LossReport:
    terms: dict[str, torch.Tensor]
    weights: dict[str, float]
    total: torch.Tensor = field(init=False)

    def __post_init__(self):
        total = None
        for name, w in self.weights.items():
            t = w * self.terms[name]
            total = t if total is None else total + t
        self.total = total

    def scalars(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def _check_pair(x, y):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} / {tuple(y.shape)}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float32, device=None):
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype=dtype, device=device)


def ssim(x, y, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, data_range: float = 1.0):
    """Mean SSIM over valid window positions, averaged over channels and batch.

    The window shrinks to the largest odd size fitting the image when the
    image is smaller than ``window``.
    """
    _check_pair(x, y)
    side = min(x.shape[-2:])
    if side < window:
        window = side if side % 2 else side - 1
    c = x.shape[1]
    w = gaussian_window(window, sigma, x.dtype, x.device).expand(c, 1, window, window)

    def filt(t):
        return F.conv2d(t, w, groups=c)

    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return (num / den).mean()


def ssim_loss(x, y):
    return 1 - ssim(x, y)


def grad_loss(x, y):
    _check_pair(x, y)
    return (sobel_gradient(x) - sobel_gradient(y)).abs().mean()


def pyramid_lift(img):
    """Lift ``B x 1 x H x W`` to 16 channels at half resolution.

    Average-pooled copies at factors 1, 2, 4, 8 are brought back to full size
    (nearest) and each is split into its four 2x2 phases.
    """
    if img.shape[1] != 1:
        raise ValueError(f"expected a single-channel image, got {img.shape[1]} channels")
    h, w = img.shape[-2:]
    m = 2 * max(GRAM_PYRAMID)
    if h % m or w % m:
        raise ValueError(f"Gram lift needs H, W divisible by {m}, got {h}x{w}")
    levels = []
    for f in GRAM_PYRAMID:
        p = F.avg_pool2d(img, f) if f > 1 else img
        levels.append(F.interpolate(p, scale_factor=f, mode="nearest") if f > 1 else p)
    return F.pixel_unshuffle(torch.cat(levels, dim=1), 2)


def gram_matrix(feat):
    """``B x C x C`` inner products over flattened pixels, divided by C*H*W."""
    b, c, h, w = feat.shape
    flat = feat.reshape(b, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def semantic_gram_loss(x, y):
    _check_pair(x, y)
    return (gram_matrix(pyramid_lift(x)) - gram_matrix(pyramid_lift(y))).pow(2).mean()


def correlation_coefficient(a, b, eps: float = 1e-12, return_degenerate: bool = False):
    """Pearson correlation over all elements of each sample, averaged over the batch.

    Samples where either side has (near) zero variance contribute 0.
    """
    _check_pair(a, b)
    n = a.shape[0]
    a = a.reshape(n, -1)
    b = b.reshape(n, -1)
    ac = a - a.mean(dim=1, keepdim=True)
    bc = b - b.mean(dim=1, keepdim=True)
    saa = (ac * ac).sum(dim=1)
    sbb = (bc * bc).sum(dim=1)
    ok = (saa > eps) & (sbb > eps)
    den = torch.sqrt(torch.where(ok, saa * sbb, torch.ones_like(saa)))
    r = torch.where(ok, (ac * bc).sum(dim=1) / den, torch.zeros_like(saa))
    r = r.mean()
    if return_degenerate:
        return r, ~ok
    return r


def decomp_loss_stage1(dv, di, bv, bi, delta: float = 1.01):
    return correlation_coefficient(dv, di) ** 2 / (correlation_coefficient(bv, bi) + delta)


def decomp_loss_stage2(dv, di, gv, gi, bv, bi, delta: float = 1.01):
    num = correlation_coefficient(dv, di) ** 2 + correlation_coefficient(gv, gi) ** 2
    return num / (correlation_coefficient(bv, bi) + delta)


def intensity_loss(fused, ir, vis):
    _check_pair(fused, ir)
    _check_pair(ir, vis)
    return (fused - torch.maximum(ir.abs(), vis.abs())).abs().mean()


def fusion_grad_loss(fused, ir, vis):
    _check_pair(fused, ir)
    _check_pair(ir, vis)
    target = torch.maximum(sobel_gradient(ir), sobel_gradient(vis))
    return (sobel_gradient(fused) - target).abs().mean()


def _decomp(tv, ti, with_graph: bool, delta: float):
    if with_graph and tv.graph is not None:
        return decomp_loss_stage2(tv.detail, ti.detail, tv.graph, ti.graph, tv.base, ti.base, delta)
    return decomp_loss_stage1(tv.detail, ti.detail, tv.base, ti.base, delta)


def stage1_total(vis, vis_hat, ir, ir_hat, features, w: LossWeights = LossWeights()) -> LossReport:
    """Reconstruction of both modalities plus the decomposition term.

    ``features`` is the ``(visible, infrared)`` pair of feature triplets.
    """
    tv, ti = features
    terms = {
        "ssim_vis": ssim_loss(vis, vis_hat),
        "grad_vis": grad_loss(vis, vis_hat),
        "ssim_ir": ssim_loss(ir, ir_hat),
        "grad_ir": grad_loss(ir, ir_hat),
        "decomp": _decomp(tv, ti, w.graph_cc_stage1, w.delta),
    }
    weights = {"ssim_vis": w.beta1, "grad_vis": w.beta2, "ssim_ir": w.beta1, "grad_ir": w.beta2}
    if w.semantic:
        terms["semantic_ir"] = semantic_gram_loss(ir, ir_hat)
        weights["semantic_ir"] = 1.0
    weights["decomp"] = w.alpha1
    return LossReport(terms, weights)


def stage2_total(fused, vis, ir, features, w: LossWeights = LossWeights()) -> LossReport:
    tv, ti = features
    terms = {
        "intensity": intensity_loss(fused, ir, vis),
        "grad": fusion_grad_loss(fused, ir, vis),
        "decomp": _decomp(tv, ti, w.graph_cc_stage2, w.delta),
    }
    return LossReport(terms, {"intensity": 1.0, "grad": w.alpha2, "decomp": w.alpha3})
