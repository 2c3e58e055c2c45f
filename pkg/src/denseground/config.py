"""Run configuration: defaults, JSON round-trip, CLI overrides."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

from .scenes import SceneConfig


@dataclass
class ModelConfig:
    feature_dim: int = 32          # per-point feature width
    embed_dim: int = 128           # instance / word embedding width
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 6
    ffn_dim: int = 256
    radii: tuple = (1.0, 2.5, math.inf)
    candidate_cap: int = 32
    mask_hidden: int = 16
    seed_window: float = 0.3
    merge_radius: float = 0.3
    merge_threshold: float = 0.5
    seed_min_heat: float = 0.25
    gamma: float = 25.0
    iou_match: float = 0.25
    max_tokens: int = 32


@dataclass
class LossConfig:
    lambda_con: float = 1.0
    lambda_cam: float = 0.1
    tau_con: float = 0.3
    noun_mask_prob: float = 0.5


@dataclass
class OptimConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class MveConfig:
    views: int = 5
    threshold: float = 0.9


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 60
    eval_every: int = 1
    use_baf: bool = True
    use_contrastive: bool = True
    use_gct: bool = True
    use_mve: bool = False
    contrastive_pre_fusion: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    mve: MveConfig = field(default_factory=MveConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        def build(dc_cls, payload):
            kwargs = {}
            for f in fields(dc_cls):
                if f.name not in payload:
                    continue
                value = payload[f.name]
                if f.name in ("model", "loss", "optim", "mve", "scene"):
                    sub = {"model": ModelConfig, "loss": LossConfig, "optim": OptimConfig,
                           "mve": MveConfig, "scene": SceneConfig}[f.name]
                    value = build(sub, value)
                elif isinstance(value, list):
                    value = tuple(value)
                kwargs[f.name] = value
            return dc_cls(**kwargs)
        return build(cls, data)


def save_config(config: RunConfig, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))


def apply_overrides(config: RunConfig, args) -> RunConfig:
    """Fold recognized CLI flags into the config (None means keep)."""
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        config.epochs = args.epochs
    if getattr(args, "lr", None) is not None:
        config.optim.lr = args.lr
    if getattr(args, "views", None) is not None:
        config.mve.views = args.views
    if getattr(args, "mve_threshold", None) is not None:
        config.mve.threshold = args.mve_threshold
    if getattr(args, "family", None) is not None:
        config.scene.family = args.family
    if getattr(args, "no_baf", False):
        config.use_baf = False
    if getattr(args, "no_contrastive", False):
        config.use_contrastive = False
    if getattr(args, "no_gct", False):
        config.use_gct = False
    if getattr(args, "no_mve", False):
        config.use_mve = False
    if getattr(args, "mve", False):
        config.use_mve = True
    return config
