"""Datasets, two-stage training, checkpoints and end-to-end fusion."""

from __future__ import annotations

import csv
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .config import TrainConfig
from .imaging import (
    Channels,
    crop_patches,
    crop_to,
    load_image,
    pad_to_multiple,
    rgb_to_ycbcr,
    save_image,
    ycbcr_to_rgb,
)
from .losses import stage1_total, stage2_total
from .model import SMFNet

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
CHECKPOINT_FORMAT = 1
STAGES = ("stage1", "stage2", "joint")


# -- data -------------------------------------------------------------------


@dataclass
class PairedPatches:
    """Aligned visible / infrared grayscale patches, each ``N x 1 x s x s``."""

    vis: torch.Tensor
    ir: torch.Tensor

    def __post_init__(self):
        if self.vis.shape != self.ir.shape:
            raise ValueError(f"visible/infrared patch stacks differ: {tuple(self.vis.shape)} vs {tuple(self.ir.shape)}")
        if len(self) == 0:
            raise ValueError("dataset is empty")

    def __len__(self):
        return self.vis.shape[0]

    @classmethod
    def from_directory(cls, root, cfg: TrainConfig) -> "PairedPatches":
        """Patches from the ``ir/`` and ``vis/`` subdirectories of ``root`` (matching names)."""
        root = Path(root)
        ir_dir, vis_dir = root / "ir", root / "vis"
        for d in (ir_dir, vis_dir):
            if not d.is_dir():
                raise FileNotFoundError(f"dataset directory missing: {d}")
        names = sorted(
            p.name for p in ir_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and (vis_dir / p.name).is_file()
        )
        if not names:
            raise ValueError(f"no matching ir/vis pairs under {root}")
        vis_patches, ir_patches = [], []
        for name in names:
            vis = load_image(vis_dir / name, Channels.GRAY1)
            ir = load_image(ir_dir / name, Channels.GRAY1)
            if vis.shape != ir.shape:
                raise ValueError(f"{name}: visible {tuple(vis.shape)} and infrared {tuple(ir.shape)} differ")
            if min(vis.shape[-2:]) < cfg.patch_size:
                log.warning("skipping %s: smaller than the patch size", name)
                continue
            vis_patches += crop_patches(vis, cfg.patch)
            ir_patches += crop_patches(ir, cfg.patch)
        if not vis_patches:
            raise ValueError(f"no image under {root} is large enough for {cfg.patch_size}px patches")
        return cls(torch.cat(vis_patches), torch.cat(ir_patches))


def synthetic_pair(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """A visible/infrared pair sharing a smooth background.

    Visible carries texture and edges, infrared carries a few warm blobs.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = gaussian_filter(rng.random((size, size)), size / 6)
    base = (base - base.min()) / (np.ptp(base) + 1e-12)
    freq = rng.uniform(3, 8)
    angle = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)))
    step = (xx > rng.uniform(0.3, 0.7)).astype(float)
    vis = 0.5 * base + 0.3 * stripes + 0.2 * step
    blobs = np.zeros_like(base)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.06, 0.15)
        blobs += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    ir = 0.35 * base + 0.65 * np.clip(blobs, 0, 1)
    return np.clip(vis, 0, 1), np.clip(ir, 0, 1)


def toy_patches(count: int = 8, size: int = 32, seed: int = 0) -> PairedPatches:
    rng = np.random.default_rng(seed)
    pairs = [synthetic_pair(size, rng) for _ in range(count)]
    vis = torch.tensor(np.stack([p[0] for p in pairs]), dtype=torch.float32)[:, None]
    ir = torch.tensor(np.stack([p[1] for p in pairs]), dtype=torch.float32)[:, None]
    return PairedPatches(vis, ir)


def write_toy_dataset(root, count: int = 4, size: int = 64, seed: int = 0) -> Path:
    """Write synthetic pairs as 8-bit PNGs under ``root/ir`` and ``root/vis``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for i in range(count):
        vis, ir = synthetic_pair(size, rng)
        save_image(torch.tensor(vis)[None, None], root / "vis" / f"{i:04d}.png")
        save_image(torch.tensor(ir)[None, None], root / "ir" / f"{i:04d}.png")
    return root


def epoch_batches(n: int, batch_size: int, gen: torch.Generator) -> list[torch.Tensor]:
    """Shuffled index batches; the last partial batch is dropped."""
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds dataset size {n}")
    order = torch.randperm(n, generator=gen)
    return [order[i : i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    state_dict: dict[str, torch.Tensor]
    config: TrainConfig
    stage: str
    epoch: int
    seed: int
    has_fusion: bool
    rng_state: torch.Tensor | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    @classmethod
    def from_model(cls, model: SMFNet, cfg: TrainConfig, stage: str, epoch: int) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(state, cfg, stage, epoch, cfg.seed, model.has_fusion, torch.get_rng_state())

    def manifest(self) -> dict:
        mcfg = self.config.model_config()
        streams = 3 if mcfg.use_graph else 2
        return {
            "format": CHECKPOINT_FORMAT,
            "stage": self.stage,
            "epoch": self.epoch,
            "seed": self.seed,
            "has_fusion": self.has_fusion,
            "use_graph": mcfg.use_graph,
            "decoder_in_channels": mcfg.dim * streams if mcfg.aggregate == "concat" else mcfg.dim,
            "config": self.config.flat(),
            "parameters": sorted(self.state_dict),
            "parameter_count": int(sum(v.numel() for v in self.state_dict.values())),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = io.BytesIO()
        torch.save({"state_dict": self.state_dict, "rng_state": self.rng_state}, blob)
        with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("manifest.json", json.dumps(self.manifest(), indent=2))
            zf.writestr("weights.pt", blob.getvalue())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        try:
            with zipfile.ZipFile(path) as zf:
                manifest = json.loads(zf.read("manifest.json"))
                payload = torch.load(io.BytesIO(zf.read("weights.pt")), map_location="cpu", weights_only=True)
        except (zipfile.BadZipFile, KeyError) as exc:
            raise ValueError(f"not a valid checkpoint archive: {path} ({exc})") from None
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
        return cls(
            payload["state_dict"],
            TrainConfig.from_flat(manifest["config"]),
            manifest["stage"],
            manifest["epoch"],
            manifest["seed"],
            manifest["has_fusion"],
            payload.get("rng_state"),
        )

    def build_model(self) -> SMFNet:
        model = SMFNet(self.config.model_config(), with_fusion=self.has_fusion)
        model.load_state_dict(self.state_dict)
        return model


def read_manifest(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("manifest.json"))


# -- training ---------------------------------------------------------------


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    steps: list[dict[str, float]] = field(default_factory=list)  # per iteration
    epochs: list[dict[str, float]] = field(default_factory=list)  # per-epoch means


class _CsvLog:
    def __init__(self, path):
        self.path = Path(path) if path else None

    def write(self, stage: str, epoch: int, row: dict[str, float]) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists()
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["stage", "epoch", "term", "value"])
            for k, v in row.items():
                w.writerow([stage, epoch, k, f"{v:.8g}"])


def _dump_batch(out_dir, stage, step, vis, ir, report) -> Path | None:
    if out_dir is None:
        return None
    path = Path(out_dir) / f"nonfinite_{stage}_step{step}.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"vis": vis, "ir": ir, "terms": report.scalars()}, path)
    return path


def _run(model, params, cfg: TrainConfig, data: PairedPatches, stage: str, epochs: int,
         loss_fn, out_dir=None, log_path=None) -> TrainResult:
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    csv_log = _CsvLog(log_path)
    steps, epoch_rows = [], []
    step = 0
    model.train()
    done = False
    for epoch in range(epochs):
        acc: dict[str, float] = {}
        batches = epoch_batches(len(data), cfg.batch_size, gen)
        for idx in batches:
            vis, ir = data.vis[idx], data.ir[idx]
            report = loss_fn(model, vis, ir)
            if not torch.isfinite(report.total):
                dumped = _dump_batch(out_dir, stage, step, vis, ir, report)
                raise NonFiniteLossError(
                    f"{stage}: non-finite loss at epoch {epoch} step {step}; terms {report.scalars()}"
                    + (f"; batch saved to {dumped}" if dumped else "")
                )
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            vals = report.scalars()
            steps.append(vals)
            for k, v in vals.items():
                acc[k] = acc.get(k, 0.0) + v / len(batches)
            step += 1
            if cfg.max_iterations and step >= cfg.max_iterations:
                done = True
                break
        if done and step % len(batches):
            acc = {k: v * len(batches) / (step % len(batches)) for k, v in acc.items()}
        epoch_rows.append(acc)
        csv_log.write(stage, epoch, acc)
        log.info("%s epoch %d: %s", stage, epoch, ", ".join(f"{k}={v:.4f}" for k, v in acc.items()))
        if done:
            break
    model.eval()
    return TrainResult(Checkpoint.from_model(model, cfg, stage, len(epoch_rows)), steps, epoch_rows)


def _stage1_loss(cfg):
    weights = cfg.loss_weights()

    def fn(model, vis, ir):
        vis_hat, ir_hat, feats = model.forward_stage1(vis, ir)
        return stage1_total(vis, vis_hat, ir, ir_hat, feats, weights)

    return fn


def _stage2_loss(cfg):
    weights = cfg.loss_weights()

    def fn(model, vis, ir):
        fused, feats = model.forward_stage2(vis, ir)
        return stage2_total(fused, vis, ir, feats, weights)

    return fn


def train_stage1(cfg: TrainConfig, data: PairedPatches, out_dir=None, log_path=None) -> TrainResult:
    torch.manual_seed(cfg.seed)
    model = SMFNet(cfg.model_config())
    return _run(model, list(model.parameters()), cfg, data, "stage1", cfg.epochs_stage1,
                _stage1_loss(cfg), out_dir, log_path)


def train_stage2(cfg: TrainConfig, data: PairedPatches, init: Checkpoint, out_dir=None, log_path=None) -> TrainResult:
    """Insert the fusion layers into a stage-I model and train on the fusion objective.

    The network structure comes from the stage-I checkpoint; ``cfg`` supplies
    the optimisation settings and loss weights.
    """
    if init.stage != "stage1":
        raise ValueError(f"stage II needs a stage-I checkpoint, got {init.stage!r}")
    torch.manual_seed(cfg.seed + 1)
    model = init.build_model()
    model.add_fusion_layers()
    if cfg.freeze_stage2:
        for p in model.parameters():
            p.requires_grad_(False)
        for p in model.fusion.parameters():
            p.requires_grad_(True)
    params = [p for p in model.parameters() if p.requires_grad]
    # structure from the checkpoint, optimisation settings and loss weights from cfg
    snapshot = init.config.with_values({k: v for k, v in cfg.flat().items() if not k.startswith("model.")})
    return _run(model, params, snapshot, data, "stage2", cfg.epochs_stage2,
                _stage2_loss(cfg), out_dir, log_path)


def train_joint(cfg: TrainConfig, data: PairedPatches, out_dir=None, log_path=None) -> TrainResult:
    """Single stage from scratch: encoder, fusion layers and decoder together."""
    torch.manual_seed(cfg.seed)
    model = SMFNet(cfg.model_config(), with_fusion=True)
    return _run(model, list(model.parameters()), cfg, data, "joint", cfg.epochs_stage1 + cfg.epochs_stage2,
                _stage2_loss(cfg), out_dir, log_path)


def train_all(cfg: TrainConfig, data: PairedPatches, out_dir) -> dict[str, TrainResult]:
    """Run the configured schedule, saving checkpoints and the log under ``out_dir``."""
    out_dir = Path(out_dir)
    log_path = out_dir / "train_log.csv"
    results = {}
    if cfg.joint_stage:
        results["joint"] = train_joint(cfg, data, out_dir, log_path)
    else:
        results["stage1"] = train_stage1(cfg, data, out_dir, log_path)
        results["stage1"].checkpoint.save(out_dir / "stage1.ckpt")
        results["stage2"] = train_stage2(cfg, data, results["stage1"].checkpoint, out_dir, log_path)
    final = results["joint" if cfg.joint_stage else "stage2"]
    final.checkpoint.save(out_dir / ("joint.ckpt" if cfg.joint_stage else "stage2.ckpt"))
    return results


def plot_losses(results: dict[str, TrainResult], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(results), figsize=(5 * len(results), 3.5), squeeze=False)
    for ax, (stage, res) in zip(axes[0], results.items()):
        ax.plot([s["total"] for s in res.steps], lw=1)
        ax.set_title(stage)
        ax.set_xlabel("iteration")
        ax.set_ylabel("total loss")
        ax.set_yscale("log" if all(s["total"] > 0 for s in res.steps) else "linear")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


# -- inference --------------------------------------------------------------


def _as_image(t, name: str) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.float32)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[None]
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] not in (1, 3):
        raise ValueError(f"{name} must be a single 1- or 3-channel image, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")
    return t


def fuse_pair(model_or_ckpt, ir, vis) -> torch.Tensor:
    """Fuse one pair into a ``1 x 3 x H x W`` RGB image in [0, 1].

    The network fuses luminance; the visible chroma is carried over.
    Any size is accepted: inputs are reflect-padded to the network multiple
    and the result is cropped back.
    """
    model = model_or_ckpt.build_model() if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt
    if not model.has_fusion:
        raise RuntimeError("fusion layers missing: this checkpoint has only been trained for reconstruction")
    ir, vis = _as_image(ir, "ir"), _as_image(vis, "vis")
    if ir.shape[1] == 3:
        ir = rgb_to_ycbcr(ir)[:, :1]
    if ir.shape[-2:] != vis.shape[-2:]:
        raise ValueError(f"ir {tuple(ir.shape[-2:])} and vis {tuple(vis.shape[-2:])} sizes differ")
    ycc = rgb_to_ycbcr(vis) if vis.shape[1] == 3 else torch.cat([vis, torch.full_like(vis, 0.5).expand(-1, 2, -1, -1)], 1)
    m = model.cfg.size_multiple
    y, dims = pad_to_multiple(ycc[:, :1], m)
    ir_p, _ = pad_to_multiple(ir, m)
    model.eval()
    with torch.inference_mode():
        fused_y = crop_to(model(y, ir_p), dims)
    rgb = ycbcr_to_rgb(torch.cat([fused_y, ycc[:, 1:]], dim=1))
    return rgb.clamp(0.0, 1.0)


def fuse_directory(model_or_ckpt, ir_dir, vis_dir, out_dir) -> list[Path]:
    """Fuse every name present in both directories; outputs mirror the input names as PNG."""
    model = model_or_ckpt.build_model() if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt
    ir_dir, vis_dir, out_dir = Path(ir_dir), Path(vis_dir), Path(out_dir)
    for d in (ir_dir, vis_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    names = sorted(p.name for p in ir_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    written = []
    for name in names:
        if not (vis_dir / name).is_file():
            log.warning("no visible counterpart for %s", name)
            continue
        ir = load_image(ir_dir / name, Channels.GRAY1)
        vis = load_image(vis_dir / name, Channels.RGB3)
        out = out_dir / (Path(name).stem + ".png")
        save_image(fuse_pair(model, ir, vis), out)
        written.append(out)
    return written


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if window < 1 or v.size < window:
        raise ValueError("window must be in [1, len(values)]")
    return np.convolve(v, np.ones(window) / window, mode="valid")
