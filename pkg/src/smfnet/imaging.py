"""Image I/O, colour conversion, patching and shape normalisation.

Images are torch tensors laid out ``B x C x H x W`` with intensities in [0, 1].
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import cv2
import numpy as np
import torch
import torch.nn.functional as F

# ITU-R BT.601 full-range (JPEG) YCbCr; chroma is offset by 0.5.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
_RGB2YCC = torch.tensor(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ],
    dtype=torch.float64,
)
_YCC2RGB = torch.linalg.inv(_RGB2YCC)
_CHROMA_OFFSET = torch.tensor([0.0, 0.5, 0.5], dtype=torch.float64)

MIN_SIDE = 8


class Channels(enum.Enum):
    GRAY1 = "gray"
    RGB3 = "rgb"
    YCBCR3 = "ycbcr"

    @property
    def count(self) -> int:
        return 1 if self is Channels.GRAY1 else 3


@dataclass(frozen=True)
class PatchSpec:
    size: int = 128
    stride: int = 128

    def __post_init__(self):
        if self.size <= 0 or self.stride <= 0:
            raise ValueError(f"patch size and stride must be positive, got {self.size}/{self.stride}")


def check_image(img: torch.Tensor, channels: int | None = None) -> torch.Tensor:
    """Validate a ``B x C x H x W`` image tensor and return it unchanged."""
    if img.ndim != 4:
        raise ValueError(f"expected a B x C x H x W tensor, got shape {tuple(img.shape)}")
    if channels is not None and img.shape[1] != channels:
        raise ValueError(f"expected {channels} channel(s), got {img.shape[1]}")
    if img.shape[-2] < MIN_SIDE or img.shape[-1] < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}, got {tuple(img.shape[-2:])}")
    return img


def _normalise(raw: np.ndarray) -> np.ndarray:
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    elif np.issubdtype(raw.dtype, np.floating):
        scale = 1.0
    else:
        raise ValueError(f"unsupported raster dtype {raw.dtype}")
    return np.clip(raw.astype(np.float64) / scale, 0.0, 1.0)


def load_image(path: str | os.PathLike, mode: Channels = Channels.GRAY1) -> torch.Tensor:
    """Read an 8/16-bit raster into a ``1 x C x H x W`` float32 tensor in [0, 1]."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"could not decode image: {path}")
    if raw.size == 0 or min(raw.shape[:2]) == 0:
        raise ValueError(f"zero-sized image: {path}")
    arr = _normalise(raw)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[2] == 4:
        arr = arr[..., :3]
    if arr.shape[2] == 3:
        arr = arr[..., ::-1]  # BGR -> RGB
    chw = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]

    if mode is Channels.GRAY1:
        out = chw if chw.shape[1] == 1 else rgb_to_gray(chw)
    else:
        rgb = chw.expand(-1, 3, -1, -1) if chw.shape[1] == 1 else chw
        out = rgb if mode is Channels.RGB3 else rgb_to_ycbcr(rgb)
    return out.float().clamp_(0.0, 1.0)


def save_image(img: torch.Tensor, path: str | os.PathLike) -> None:
    """Write a ``1 x C x H x W`` (C in {1, 3}) RGB/gray tensor as an 8-bit PNG."""
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ValueError("save_image writes one image at a time")
        img = img[0]
    arr = img.detach().cpu().double().clamp(0, 1).numpy().transpose(1, 2, 0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.shape[2] == 3:
        arr = arr[..., ::-1]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if not cv2.imwrite(os.fspath(path), np.ascontiguousarray(arr)):
        raise OSError(f"could not write {path}")


def rgb_to_gray(img: torch.Tensor) -> torch.Tensor:
    if img.shape[1] != 3:
        raise ValueError(f"rgb_to_gray needs 3 channels, got {img.shape[1]}")
    w = torch.tensor(LUMA_WEIGHTS, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
    return (img * w).sum(dim=1, keepdim=True)


def _apply_colour_matrix(img: torch.Tensor, mat: torch.Tensor) -> torch.Tensor:
    mat = mat.to(dtype=img.dtype, device=img.device)
    return torch.einsum("oc,bchw->bohw", mat, img)


def rgb_to_ycbcr(img: torch.Tensor) -> torch.Tensor:
    if img.ndim != 4 or img.shape[1] != 3:
        raise ValueError(f"rgb_to_ycbcr needs a B x 3 x H x W tensor, got {tuple(img.shape)}")
    offset = _CHROMA_OFFSET.to(dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
    return _apply_colour_matrix(img, _RGB2YCC) + offset


def ycbcr_to_rgb(img: torch.Tensor) -> torch.Tensor:
    if img.ndim != 4 or img.shape[1] != 3:
        raise ValueError(f"ycbcr_to_rgb needs a B x 3 x H x W tensor, got {tuple(img.shape)}")
    offset = _CHROMA_OFFSET.to(dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
    return _apply_colour_matrix(img - offset, _YCC2RGB)


def patch_count(height: int, width: int, spec: PatchSpec) -> int:
    rows = (height - spec.size) // spec.stride + 1
    cols = (width - spec.size) // spec.stride + 1
    return rows * cols


def crop_patches(img: torch.Tensor, spec: PatchSpec) -> list[torch.Tensor]:
    """Cut ``img`` (``1 x C x H x W`` or ``C x H x W``) into square patches, row-major."""
    if img.ndim == 3:
        img = img[None]
    h, w = img.shape[-2:]
    if spec.size > h or spec.size > w:
        raise ValueError(f"patch size {spec.size} exceeds image size {h}x{w}")
    return [
        img[..., top : top + spec.size, left : left + spec.size]
        for top in range(0, h - spec.size + 1, spec.stride)
        for left in range(0, w - spec.size + 1, spec.stride)
    ]


def pad_to_multiple(img: torch.Tensor, m: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad bottom/right so both sides are multiples of ``m``."""
    if m < 1:
        raise ValueError(f"multiple must be >= 1, got {m}")
    h, w = img.shape[-2:]
    pad_h = -h % m
    pad_w = -w % m
    if pad_h == 0 and pad_w == 0:
        return img, (h, w)
    # reflect needs pad < side; tiny inputs fall back to edge replication
    mode = "reflect" if pad_h < h and pad_w < w else "replicate"
    return F.pad(img, (0, pad_w, 0, pad_h), mode=mode), (h, w)


def crop_to(img: torch.Tensor, dims: tuple[int, int]) -> torch.Tensor:
    return img[..., : dims[0], : dims[1]]
