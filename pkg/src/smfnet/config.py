"""Training configuration, INI round trip, and ablation presets."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .encoder import BfeConfig, CaiConfig
from .graph import GrConfig
from .imaging import PatchSpec
from .losses import LossWeights
from .model import ModelConfig


def _f(default, section: str):
    return field(default=default, metadata={"section": section})


@dataclass(frozen=True)
class TrainConfig:
    # [train]
    epochs_stage1: int = _f(40, "train")
    epochs_stage2: int = _f(80, "train")
    batch_size: int = _f(6, "train")
    patch_size: int = _f(128, "train")
    patch_stride: int = _f(128, "train")
    learning_rate: float = _f(1e-4, "train")
    seed: int = _f(0, "train")
    grad_clip: float = _f(5.0, "train")
    freeze_stage2: bool = _f(False, "train")  # freeze encoder/decoder in stage II
    joint_stage: bool = _f(False, "train")  # single stage from scratch (AE9)
    max_iterations: int = _f(0, "train")  # 0: no cap; otherwise stop each stage after this many steps
    # [loss]
    alpha1: float = _f(2.0, "loss")
    beta1: float = _f(8.0, "loss")
    beta2: float = _f(10.0, "loss")
    alpha2: float = _f(10.0, "loss")
    alpha3: float = _f(2.0, "loss")
    delta: float = _f(1.01, "loss")
    semantic: bool = _f(True, "loss")
    graph_cc_stage1: bool = _f(False, "loss")
    graph_cc_stage2: bool = _f(True, "loss")
    # [model]
    dim: int = _f(64, "model")
    heads: int = _f(8, "model")
    cross_attention: bool = _f(True, "model")
    dense_layers: int = _f(3, "model")
    growth: int = _f(32, "model")
    bottleneck: int = _f(32, "model")
    exp_clamp: float = _f(5.0, "model")
    bfe_groups: int = _f(2, "model")
    bfe_blocks: int = _f(2, "model")
    bfe_residual: bool = _f(True, "model")
    ffn_expansion: float = _f(2.0, "model")
    use_graph: bool = _f(True, "model")
    gr_rounds: int = _f(1, "model")
    gr_kernel: int = _f(3, "model")
    aggregate: str = _f("add", "model")
    detail_layers: int = _f(2, "model")
    swap_fusion_layers: bool = _f(False, "model")

    def __post_init__(self):
        for name in ("epochs_stage1", "epochs_stage2", "batch_size", "dim", "heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.aggregate not in ("add", "concat"):
            raise ValueError(f"aggregate must be 'add' or 'concat', got {self.aggregate!r}")
        PatchSpec(self.patch_size, self.patch_stride)
        self.model_config()
        self.loss_weights()

    @property
    def patch(self) -> PatchSpec:
        return PatchSpec(self.patch_size, self.patch_stride)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            alpha1=self.alpha1,
            beta1=self.beta1,
            beta2=self.beta2,
            alpha2=self.alpha2,
            alpha3=self.alpha3,
            delta=self.delta,
            semantic=self.semantic,
            graph_cc_stage1=self.graph_cc_stage1,
            graph_cc_stage2=self.graph_cc_stage2,
        )

    def model_config(self) -> ModelConfig:
        half = self.dim // 2
        return ModelConfig(
            dim=self.dim,
            heads=self.heads,
            cai=CaiConfig(
                total_channels=self.dim,
                split=half,
                heads=self.heads,
                exp_clamp=self.exp_clamp,
                dense_layers=self.dense_layers,
                growth=self.growth,
                bottleneck=self.bottleneck,
                cross_attention=self.cross_attention,
            ),
            bfe=BfeConfig(
                blocks_per_group=self.bfe_blocks,
                groups=self.bfe_groups,
                ffn_expansion=self.ffn_expansion,
                heads=self.heads,
                residual=self.bfe_residual,
            ),
            gr=GrConfig(rounds=self.gr_rounds, node_channels=self.dim, gru_kernel=self.gr_kernel),
            use_graph=self.use_graph,
            aggregate=self.aggregate,
            detail_layers=self.detail_layers,
            swap_fusion_layers=self.swap_fusion_layers,
        )

    # -- text round trip ----------------------------------------------------

    @classmethod
    def known_keys(cls) -> list[str]:
        return [f"{f.metadata['section']}.{f.name}" for f in fields(cls)]

    def as_sections(self) -> dict[str, dict[str, str]]:
        out: dict[str, dict[str, str]] = {}
        for f in fields(self):
            out.setdefault(f.metadata["section"], {})[f.name] = _format(getattr(self, f.name))
        return out

    def to_ini(self, path) -> None:
        cp = configparser.ConfigParser()
        cp.read_dict(self.as_sections())
        with open(path, "w") as fh:
            cp.write(fh)

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in self.flat().items())

    def flat(self) -> dict[str, str]:
        return {f"{s}.{k}": v for s, kv in self.as_sections().items() for k, v in kv.items()}

    @classmethod
    def from_ini(cls, path, overrides=()) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.read(path)
        values = {f"{s}.{k}": v for s in cp.sections() for k, v in cp[s].items()}
        return cls().with_values(values).with_overrides(overrides)

    @classmethod
    def from_flat(cls, values: dict[str, str]) -> "TrainConfig":
        return cls().with_values(values)

    def with_overrides(self, overrides) -> "TrainConfig":
        values = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            k, v = item.split("=", 1)
            values[k.strip()] = v.strip()
        return self.with_values(values)

    def with_values(self, values: dict[str, str]) -> "TrainConfig":
        by_key = {f"{f.metadata['section']}.{f.name}": f for f in fields(self)}
        changes = {}
        for key, raw in values.items():
            f = by_key.get(key)
            if f is None:
                raise ConfigError(f"unknown config key {key!r}; known keys: {', '.join(by_key)}")
            try:
                changes[f.name] = _parse(raw, type(getattr(self, f.name)))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        try:
            return replace(self, **changes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


class ConfigError(ValueError):
    pass


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_BOOLS = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _parse(raw: str, kind):
    raw = str(raw).strip()
    if kind is bool:
        if raw.lower() not in _BOOLS:
            raise ValueError(f"expected a boolean, got {raw!r}")
        return _BOOLS[raw.lower()]
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


# -- ablations --------------------------------------------------------------

ABLATIONS = {
    "AE1": ("plain coupling, no cross attention", {"cross_attention": False}),
    "AE2": ("base branch without residual skips", {"bfe_residual": False}),
    "AE3": ("graph branch removed", {"use_graph": False}),
    "AE4": ("concatenation aggregation in the decoder", {"aggregate": "concat"}),
    "AE5": ("detail and base fusion layers swapped", {"swap_fusion_layers": True}),
    "AE6": ("no Gram loss", {"semantic": False}),
    "AE7": ("no graph correlation term in either stage", {"graph_cc_stage2": False}),
    "AE8": ("graph correlation term in both stages", {"graph_cc_stage1": True}),
    "AE9": ("single joint stage", {"joint_stage": True}),
    "AE10": ("alpha1 = alpha3 = 1", {"alpha1": 1.0, "alpha3": 1.0}),
    "AE11": ("alpha1 = alpha3 = 5", {"alpha1": 5.0, "alpha3": 5.0}),
    "AE12": ("alpha1 = alpha3 = 8", {"alpha1": 8.0, "alpha3": 8.0}),
    "AE13": ("alpha1 = alpha3 = 10", {"alpha1": 10.0, "alpha3": 10.0}),
}


def apply_ablation(cfg: TrainConfig, name: str) -> TrainConfig:
    key = name.upper()
    if key not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    return replace(cfg, **ABLATIONS[key][1])


def toy_config(**changes) -> TrainConfig:
    """Narrow network and small patches for desk-scale CPU runs."""
    base = TrainConfig(
        epochs_stage1=50,
        epochs_stage2=25,
        batch_size=4,
        patch_size=32,
        patch_stride=32,
        learning_rate=2e-3,
        dim=32,
        heads=4,
        growth=16,
        bottleneck=16,
    )
    return replace(base, **changes)
