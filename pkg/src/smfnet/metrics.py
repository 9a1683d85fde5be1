"""Fused-image quality metrics: EN, SD, SF, MI, VIF, Qabf, AG, SSIM, SCD.

Every metric works on the 0-255 scale. Float inputs in [0, 1] (numpy arrays
or tensors) are quantised to the 8-bit grid first, exactly as if the image
had been written to PNG; integer arrays are taken as 8-bit already.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import cv2
import numpy as np

log = logging.getLogger(__name__)

METRIC_NAMES = ("en", "sd", "sf", "mi", "vif", "qabf", "ag", "ssim", "scd")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def to_255(img) -> np.ndarray:
    """2-D float64 array of integer levels in [0, 255]."""
    if hasattr(img, "detach"):
        img = img.detach().cpu().numpy()
    a = np.asarray(img)
    a = np.squeeze(a)
    if a.ndim != 2:
        raise ValueError(f"expected a single grayscale image, got shape {a.shape}")
    if np.issubdtype(a.dtype, np.integer):
        if a.min() < 0 or a.max() > 255:
            raise ValueError("integer images must be 8-bit")
        return a.astype(np.float64)
    a = a.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite values")
    return np.round(np.clip(a, 0.0, 1.0) * 255.0)


def _check_triple(f, a, b):
    if not f.shape == a.shape == b.shape:
        raise ValueError(f"shape mismatch {f.shape} / {a.shape} / {b.shape}")


def _filter(img, kernel, border=cv2.BORDER_REFLECT_101):
    """2-D correlation of float64 ``img`` with ``kernel``."""
    return cv2.filter2D(img, cv2.CV_64F, kernel, borderType=border)


def _valid(img, kernel):
    """Correlation restricted to positions where the kernel fits entirely."""
    kh, kw = kernel.shape
    out = _filter(img, kernel)
    rh, rw = kh // 2, kw // 2
    return out[rh : img.shape[0] - (kh - 1 - rh), rw : img.shape[1] - (kw - 1 - rw)]


def _gauss2d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    g[g < np.finfo(g.dtype).eps * g.max()] = 0
    return g / g.sum()


# -- single-image metrics ---------------------------------------------------


def entropy(img) -> float:
    a = to_255(img).astype(np.int64).ravel()
    p = np.bincount(a, minlength=256) / a.size
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def std_dev(img) -> float:
    return float(np.std(to_255(img)))


def spatial_frequency(img) -> float:
    a = to_255(img)
    rf = np.mean(np.diff(a, axis=1) ** 2)
    cf = np.mean(np.diff(a, axis=0) ** 2)
    return float(np.sqrt(rf + cf))


def average_gradient(img) -> float:
    a = to_255(img)
    dx = a[:-1, 1:] - a[:-1, :-1]
    dy = a[1:, :-1] - a[:-1, :-1]
    return float(np.mean(np.sqrt((dx**2 + dy**2) / 2)))


# -- source-referenced metrics ----------------------------------------------


def _mi(x, y) -> float:
    joint = np.bincount((x.astype(np.int64) * 256 + y.astype(np.int64)).ravel(), minlength=256 * 256)
    pxy = joint.reshape(256, 256) / x.size
    px, py = pxy.sum(axis=1), pxy.sum(axis=0)
    nz = pxy > 0
    return float((pxy[nz] * np.log(pxy[nz] / np.outer(px, py)[nz])).sum())


def mutual_information(fused, ir, vis) -> float:
    """MI(F, ir) + MI(F, vis) from 256-bin joint histograms, in nats."""
    f, a, b = to_255(fused), to_255(ir), to_255(vis)
    _check_triple(f, a, b)
    return _mi(f, a) + _mi(f, b)


def _vif_single(ref, dist, sigma_nsq: float = 2.0, eps: float = 1e-10) -> float:
    num = den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = _gauss2d(n, n / 5.0)
        if scale > 1:
            if min(ref.shape) < n:
                break
            ref = _valid(ref, win)[::2, ::2]
            dist = _valid(dist, win)[::2, ::2]
        if min(ref.shape) < n:
            break
        mu1, mu2 = _valid(ref, win), _valid(dist, win)
        s1 = np.maximum(_valid(ref * ref, win) - mu1 * mu1, 0)
        s2 = np.maximum(_valid(dist * dist, win) - mu2 * mu2, 0)
        s12 = _valid(ref * dist, win) - mu1 * mu2

        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        flat1 = s1 < eps
        g[flat1] = 0
        sv[flat1] = s2[flat1]
        s1[flat1] = 0
        flat2 = s2 < eps
        g[flat2] = 0
        sv[flat2] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv[sv <= eps] = eps

        num += np.sum(np.log10(1 + g * g * s1 / (sv + sigma_nsq)))
        den += np.sum(np.log10(1 + s1 / sigma_nsq))
    if den == 0:
        return 1.0
    return float(num / den)


def vif(fused, ir, vis) -> float:
    """Pixel-domain multi-scale VIF, summed over the two sources."""
    f, a, b = to_255(fused), to_255(ir), to_255(vis)
    _check_triple(f, a, b)
    return _vif_single(a, f) + _vif_single(b, f)


_SOBEL_Y = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float64)
_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def _edges(img):
    # true convolution with zero padding: correlate with the flipped kernel
    gx = _filter(img, _SOBEL_X[::-1, ::-1].copy(), cv2.BORDER_CONSTANT)
    gy = _filter(img, _SOBEL_Y[::-1, ::-1].copy(), cv2.BORDER_CONSTANT)
    g = np.sqrt(gx * gx + gy * gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(gx == 0, math.pi / 2, np.arctan(gy / np.where(gx == 0, 1, gx)))
    return g, a


def _edge_preservation(g_s, a_s, g_f, a_f):
    hi = np.maximum(g_s, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        strength = np.where(hi == 0, 1.0, np.minimum(g_s, g_f) / np.where(hi == 0, 1, hi))
    orient = 1 - np.abs(a_s - a_f) / (math.pi / 2)
    qg = 0.9994 / (1 + np.exp(-15 * (strength - 0.5)))
    qa = 0.9879 / (1 + np.exp(-22 * (orient - 0.8)))
    return qg * qa


def qabf(fused, ir, vis) -> float:
    """Sobel edge-transfer quality, weighted by source edge strength."""
    f, a, b = to_255(fused), to_255(ir), to_255(vis)
    _check_triple(f, a, b)
    ga, aa = _edges(a)
    gb, ab = _edges(b)
    gf, af = _edges(f)
    den = np.sum(ga + gb)
    if den == 0:
        return 0.0
    num = np.sum(_edge_preservation(ga, aa, gf, af) * ga + _edge_preservation(gb, ab, gf, af) * gb)
    return float(num / den)


def _ssim_255(x, y, window: int = 11, sigma: float = 1.5) -> float:
    side = min(x.shape)
    if side < window:
        window = side if side % 2 else side - 1
    w = _gauss2d(window, sigma)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    mx, my = _valid(x, w), _valid(y, w)
    sxx = _valid(x * x, w) - mx * mx
    syy = _valid(y * y, w) - my * my
    sxy = _valid(x * y, w) - mx * my
    m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(m.mean())


def ssim_metric(fused, ir, vis, reduction: str = "sum") -> float:
    """SSIM(F, ir) and SSIM(F, vis) combined by ``reduction`` ("sum" or "mean")."""
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown SSIM reduction {reduction!r}")
    f, a, b = to_255(fused), to_255(ir), to_255(vis)
    _check_triple(f, a, b)
    total = _ssim_255(f, a) + _ssim_255(f, b)
    return total if reduction == "sum" else total / 2


def _pearson(x, y) -> float:
    xc, yc = x - x.mean(), y - y.mean()
    den = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if den == 0:
        return 0.0
    return float((xc * yc).sum() / den)


def scd(fused, ir, vis) -> float:
    """Sum of correlations of differences: r(F - vis, ir) + r(F - ir, vis)."""
    f, a, b = to_255(fused), to_255(ir), to_255(vis)
    _check_triple(f, a, b)
    return _pearson(f - b, a) + _pearson(f - a, b)


# -- reports ----------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    en: float
    sd: float
    sf: float
    mi: float
    vif: float
    qabf: float
    ag: float
    ssim: float
    scd: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def mean(cls, reports) -> "MetricsReport":
        reports = list(reports)
        if not reports:
            raise ValueError("cannot average zero reports")
        return cls(**{f.name: float(np.mean([getattr(r, f.name) for r in reports])) for f in fields(cls)})


def evaluate_pair(fused, ir, vis, ssim_reduction: str = "sum") -> MetricsReport:
    f, a, b = (to_255(t).astype(np.uint8) for t in (fused, ir, vis))
    _check_triple(f, a, b)
    report = MetricsReport(
        en=entropy(f),
        sd=std_dev(f),
        sf=spatial_frequency(f),
        mi=mutual_information(f, a, b),
        vif=vif(f, a, b),
        qabf=qabf(f, a, b),
        ag=average_gradient(f),
        ssim=ssim_metric(f, a, b, reduction=ssim_reduction),
        scd=scd(f, a, b),
    )
    bad = [k for k, v in report.as_dict().items() if not math.isfinite(v)]
    if bad:
        raise ArithmeticError(f"non-finite metrics: {bad}")
    return report


@dataclass
class MetricsTable:
    rows: list[tuple[str, MetricsReport]]
    errors: list[str]

    @property
    def status(self) -> str:
        return "ok" if self.rows else "no pairs"

    @property
    def mean(self) -> MetricsReport | None:
        return MetricsReport.mean(r for _, r in self.rows) if self.rows else None

    def format(self) -> str:
        head = f"{'image':<24}" + "".join(f"{m.upper():>10}" for m in METRIC_NAMES)
        lines = [head]
        for name, r in self.rows:
            lines.append(f"{name:<24}" + "".join(f"{v:>10.4f}" for v in r.as_dict().values()))
        if self.rows:
            lines.append(f"{'mean':<24}" + "".join(f"{v:>10.4f}" for v in self.mean.as_dict().values()))
        else:
            lines.append("(no pairs)")
        if self.errors:
            lines.append("")
            lines.append("errors:")
            lines.extend(f"  {e}" for e in self.errors)
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", *METRIC_NAMES])
            for name, r in self.rows:
                w.writerow([name, *(f"{v:.6f}" for v in r.as_dict().values())])
            if self.rows:
                w.writerow(["mean", *(f"{v:.6f}" for v in self.mean.as_dict().values())])


def _read_gray_u8(path: Path) -> np.ndarray:
    from .imaging import Channels, load_image

    return to_255(load_image(path, Channels.GRAY1)).astype(np.uint8)


def _listing(d: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def evaluate_directory(fused_dir, ir_dir, vis_dir, ssim_reduction: str = "sum") -> MetricsTable:
    """Per-image metrics for every fused image with both source counterparts."""
    fused_dir, ir_dir, vis_dir = Path(fused_dir), Path(ir_dir), Path(vis_dir)
    for d in (fused_dir, ir_dir, vis_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    fused, ir, vis = _listing(fused_dir), _listing(ir_dir), _listing(vis_dir)
    rows, errors = [], []
    for name in sorted(fused):
        missing = [label for label, src in (("ir", ir), ("vis", vis)) if name not in src]
        if missing:
            errors.append(f"{name}: missing {' and '.join(missing)} counterpart")
            continue
        try:
            f, a, b = (_read_gray_u8(p[name]) for p in (fused, ir, vis))
            rows.append((name, evaluate_pair(f, a, b, ssim_reduction)))
        except (OSError, ValueError, ArithmeticError) as exc:
            errors.append(f"{name}: {exc}")
        log.debug("evaluated %s", name)
    return MetricsTable(rows, errors)
