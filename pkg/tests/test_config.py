import dataclasses

import pytest
from hypothesis import given
from hypothesis import strategies as st

from smfnet.config import ABLATIONS, ConfigError, TrainConfig, apply_ablation, toy_config


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs_stage1, cfg.epochs_stage2, cfg.batch_size) == (40, 80, 6)
    assert (cfg.patch_size, cfg.learning_rate, cfg.dim, cfg.heads) == (128, 1e-4, 64, 8)
    w = cfg.loss_weights()
    assert (w.alpha1, w.beta1, w.beta2, w.alpha2, w.alpha3, w.delta) == (2, 8, 10, 10, 2, 1.01)


def test_ini_round_trip(tmp_path):
    cfg = toy_config(seed=7, alpha1=3.5, aggregate="concat", use_graph=False)
    cfg.to_ini(tmp_path / "c.ini")
    assert TrainConfig.from_ini(tmp_path / "c.ini") == cfg
    assert TrainConfig.from_flat(cfg.flat()) == cfg


@given(
    seed=st.integers(0, 10**6),
    lr=st.floats(1e-6, 1.0),
    alpha1=st.floats(0, 20),
    semantic=st.booleans(),
    dim=st.sampled_from([16, 32, 64]),
)
def test_round_trip_property(tmp_path_factory, seed, lr, alpha1, semantic, dim):
    cfg = TrainConfig(seed=seed, learning_rate=lr, alpha1=alpha1, semantic=semantic, dim=dim, heads=4)
    path = tmp_path_factory.mktemp("cfg") / "c.ini"
    cfg.to_ini(path)
    assert TrainConfig.from_ini(path) == cfg


def test_unknown_key_lists_known_keys(tmp_path):
    (tmp_path / "c.ini").write_text("[train]\nepochs = 3\n")
    with pytest.raises(ConfigError) as err:
        TrainConfig.from_ini(tmp_path / "c.ini")
    msg = str(err.value)
    assert "train.epochs" in msg
    for key in TrainConfig.known_keys():
        assert key in msg


def test_overrides():
    cfg = TrainConfig().with_overrides(["train.seed=3", "loss.semantic=false", "model.aggregate = concat"])
    assert cfg.seed == 3 and cfg.semantic is False and cfg.aggregate == "concat"
    for bad in (["train.seed"], ["train.seed=abc"], ["loss.semantic=maybe"], ["nope.x=1"], ["train.batch_size=0"]):
        with pytest.raises(ConfigError):
            TrainConfig().with_overrides(bad)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        TrainConfig.from_ini(tmp_path / "absent.ini")


def test_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(aggregate="mean")
    with pytest.raises(ValueError):
        TrainConfig(delta=0.5)
    with pytest.raises(ValueError):
        TrainConfig(dim=64, heads=5)
    with pytest.raises(ValueError):
        TrainConfig(max_iterations=-1)


def test_sections_cover_every_field():
    sections = TrainConfig().as_sections()
    assert set(sections) == {"train", "loss", "model"}
    assert sum(len(v) for v in sections.values()) == len(dataclasses.fields(TrainConfig))
    assert "train.seed = 0" in TrainConfig().to_text()


def test_model_config_mapping():
    mc = toy_config().model_config()
    assert mc.dim == 32 and mc.cai.split == 16 and mc.cai.total_channels == 32
    assert mc.gr.node_channels == 32 and mc.size_multiple == 8
    assert toy_config(use_graph=False).model_config().size_multiple == 1


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_every_ablation_applies(name):
    cfg = apply_ablation(TrainConfig(), name.lower())
    for k, v in ABLATIONS[name][1].items():
        assert getattr(cfg, k) == v


def test_specific_ablations():
    assert apply_ablation(TrainConfig(), "AE3").use_graph is False
    assert apply_ablation(TrainConfig(), "AE4").aggregate == "concat"
    assert apply_ablation(TrainConfig(), "AE9").joint_stage is True
    ae7 = apply_ablation(TrainConfig(), "AE7")
    assert not ae7.graph_cc_stage1 and not ae7.graph_cc_stage2
    ae8 = apply_ablation(TrainConfig(), "AE8")
    assert ae8.graph_cc_stage1 and ae8.graph_cc_stage2
    with pytest.raises(ConfigError):
        apply_ablation(TrainConfig(), "AE99")
