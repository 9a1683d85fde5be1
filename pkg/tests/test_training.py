import csv
import zipfile

import numpy as np
import pytest
import torch

from smfnet.config import toy_config
from smfnet.model import SMFNet
from smfnet.training import (
    Checkpoint,
    NonFiniteLossError,
    PairedPatches,
    epoch_batches,
    fuse_directory,
    fuse_pair,
    moving_average,
    plot_losses,
    read_manifest,
    synthetic_pair,
    toy_patches,
    train_all,
    train_joint,
    train_stage1,
    train_stage2,
    write_toy_dataset,
)


def tiny(**changes):
    base = dict(dim=8, heads=2, growth=4, bottleneck=4, batch_size=2, patch_size=16, patch_stride=16,
                max_iterations=2, epochs_stage1=1, epochs_stage2=1)
    base.update(changes)
    return toy_config(**base)


@pytest.fixture(scope="module")
def data():
    return toy_patches(count=4, size=16, seed=0)


@pytest.fixture(scope="module")
def stage1(data):
    return train_stage1(tiny(), data)


def _same_state(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# -- data -------------------------------------------------------------------


def test_synthetic_pair_range_and_determinism():
    a = synthetic_pair(24, np.random.default_rng(3))
    b = synthetic_pair(24, np.random.default_rng(3))
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
        assert x.shape == (24, 24) and x.min() >= 0 and x.max() <= 1


def test_paired_patches_validation():
    with pytest.raises(ValueError):
        PairedPatches(torch.zeros(2, 1, 8, 8), torch.zeros(3, 1, 8, 8))
    with pytest.raises(ValueError):
        PairedPatches(torch.zeros(0, 1, 8, 8), torch.zeros(0, 1, 8, 8))


def test_from_directory(tmp_path):
    root = write_toy_dataset(tmp_path / "d", count=2, size=32)
    ds = PairedPatches.from_directory(root, tiny())
    assert len(ds) == 8 and ds.vis.shape == (8, 1, 16, 16)
    with pytest.raises(FileNotFoundError):
        PairedPatches.from_directory(tmp_path / "none", tiny())
    with pytest.raises(ValueError):
        PairedPatches.from_directory(root, tiny(patch_size=64, patch_stride=64))


def test_epoch_batches_drop_partial():
    g = torch.Generator().manual_seed(0)
    b = epoch_batches(7, 3, g)
    assert len(b) == 2 and all(len(x) == 3 for x in b)
    assert len(set(torch.cat(b).tolist())) == 6
    with pytest.raises(ValueError):
        epoch_batches(2, 3, g)


def test_moving_average():
    assert np.allclose(moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    with pytest.raises(ValueError):
        moving_average([1, 2], 3)


# -- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip_bit_identical(tmp_path, stage1):
    ckpt = stage1.checkpoint
    path = ckpt.save(tmp_path / "s1.ckpt")
    back = Checkpoint.load(path)
    assert _same_state(back.state_dict, ckpt.state_dict)
    assert back.config == ckpt.config and back.stage == "stage1" and back.has_fusion is False
    x = torch.rand(1, 1, 16, 16)
    m1, m2 = ckpt.build_model(), back.build_model()
    assert torch.equal(m1.forward_stage1(x, x)[0], m2.forward_stage1(x, x)[0])
    with zipfile.ZipFile(path) as zf:
        assert {"manifest.json", "weights.pt"} <= set(zf.namelist())
    man = read_manifest(path)
    assert man["stage"] == "stage1" and man["use_graph"] is True
    assert man["parameter_count"] == sum(p.numel() for p in m1.parameters())


def test_checkpoint_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / "missing.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "junk.ckpt")


# -- training ---------------------------------------------------------------


def test_stage1_deterministic(data, stage1):
    again = train_stage1(tiny(), data)
    assert _same_state(again.checkpoint.state_dict, stage1.checkpoint.state_dict)
    assert again.steps == stage1.steps
    other = train_stage1(tiny(seed=1), data)
    assert not _same_state(other.checkpoint.state_dict, stage1.checkpoint.state_dict)


def test_stage1_logs(tmp_path, data):
    log_path = tmp_path / "log.csv"
    res = train_stage1(tiny(max_iterations=0, epochs_stage1=2), data, tmp_path, log_path)
    assert len(res.steps) == 4 and len(res.epochs) == 2
    rows = list(csv.DictReader(open(log_path)))
    assert {r["stage"] for r in rows} == {"stage1"}
    assert {"total", "ssim_vis", "decomp", "semantic_ir"} <= {r["term"] for r in rows}
    png = plot_losses({"stage1": res}, tmp_path / "loss.png")
    assert png.stat().st_size > 0


def test_stage2_requires_stage1(data, stage1):
    res = train_stage2(tiny(), data, stage1.checkpoint)
    assert res.checkpoint.stage == "stage2" and res.checkpoint.has_fusion
    with pytest.raises(ValueError, match="stage-I"):
        train_stage2(tiny(), data, res.checkpoint)


def test_stage2_freeze_keeps_encoder(data, stage1):
    res = train_stage2(tiny(freeze_stage2=True), data, stage1.checkpoint)
    before, after = stage1.checkpoint.state_dict, res.checkpoint.state_dict
    for k, v in before.items():
        assert torch.equal(after[k], v), k
    assert any(k.startswith("fusion.") for k in after)


def test_stage2_structure_from_checkpoint(data, stage1):
    # a differing model section in cfg is ignored: the stage-I network is kept
    res = train_stage2(tiny(dim=16), data, stage1.checkpoint)
    assert res.checkpoint.config.dim == 8


def test_nonfinite_loss_aborts(tmp_path):
    bad = toy_patches(count=2, size=16)
    bad.vis[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError, match="non-finite"):
        train_stage1(tiny(), bad, tmp_path)
    dumps = list(tmp_path.glob("nonfinite_stage1_step*.pt"))
    assert len(dumps) == 1


def test_train_all_and_joint(tmp_path, data):
    res = train_all(tiny(), data, tmp_path / "two")
    assert set(res) == {"stage1", "stage2"}
    assert (tmp_path / "two" / "stage1.ckpt").exists() and (tmp_path / "two" / "stage2.ckpt").exists()
    res = train_all(tiny(joint_stage=True), data, tmp_path / "one")
    assert set(res) == {"joint"}
    assert read_manifest(tmp_path / "one" / "joint.ckpt")["has_fusion"] is True
    assert train_joint(tiny(), data).checkpoint.stage == "joint"


# -- inference --------------------------------------------------------------


@pytest.fixture(scope="module")
def fusion_model():
    torch.manual_seed(0)
    return SMFNet(tiny().model_config(), with_fusion=True)


@pytest.mark.parametrize("hw", [(16, 16), (13, 21), (9, 8)])
def test_fuse_pair_shapes(fusion_model, hw):
    out = fuse_pair(fusion_model, torch.rand(*hw), torch.rand(3, *hw))
    assert out.shape == (1, 3, *hw)
    assert out.min() >= 0 and out.max() <= 1


def test_fuse_pair_keeps_visible_chroma(fusion_model):
    vis = torch.rand(1, 3, 16, 16)
    out = fuse_pair(fusion_model, torch.rand(1, 1, 16, 16), vis)
    from smfnet.imaging import rgb_to_ycbcr

    chroma_in, chroma_out = rgb_to_ycbcr(vis)[:, 1:], rgb_to_ycbcr(out)[:, 1:]
    # equal up to the final [0, 1] clamp
    inside = ((out > 0) & (out < 1)).all(dim=1, keepdim=True).expand_as(chroma_in)
    assert torch.allclose(chroma_in[inside], chroma_out[inside], atol=1e-4)


def test_fuse_pair_gray_visible_is_gray(fusion_model):
    out = fuse_pair(fusion_model, torch.rand(16, 16), torch.rand(16, 16))
    assert torch.allclose(out[:, 0], out[:, 1], atol=1e-4) and torch.allclose(out[:, 1], out[:, 2], atol=1e-4)


def test_fuse_pair_errors(fusion_model, stage1):
    with pytest.raises(RuntimeError, match="fusion layers missing"):
        fuse_pair(stage1.checkpoint, torch.rand(16, 16), torch.rand(16, 16))
    with pytest.raises(ValueError):
        fuse_pair(fusion_model, torch.rand(16, 16), torch.rand(16, 17))
    with pytest.raises(ValueError):
        fuse_pair(fusion_model, torch.rand(2, 1, 16, 16), torch.rand(2, 1, 16, 16))
    nan = torch.rand(16, 16)
    nan[0, 0] = float("nan")
    with pytest.raises(ValueError):
        fuse_pair(fusion_model, nan, torch.rand(16, 16))


def test_fuse_directory(tmp_path, fusion_model):
    root = write_toy_dataset(tmp_path / "d", count=3, size=24)
    (root / "vis" / "0002.png").unlink()
    written = fuse_directory(fusion_model, root / "ir", root / "vis", tmp_path / "out")
    assert [p.name for p in written] == ["0000.png", "0001.png"]
    with pytest.raises(FileNotFoundError):
        fuse_directory(fusion_model, tmp_path / "none", root / "vis", tmp_path / "out")
