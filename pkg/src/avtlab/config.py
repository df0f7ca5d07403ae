"""Experiment configuration: dataclasses with JSON round-tripping.

Flags override file values at the CLI layer; everything that affects a run
lives here so a resolved config written next to the outputs reproduces it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError

APPROACHES = ("none", "kl_na", "kl_nva", "sq_na", "sq_nva", "le")
MASKS = ("none", "image_only", "sound_only")
INITS = ("pretrained_teacher", "random")


@dataclass
class LossConfig:
    approach: str = "none"
    alpha: float = 0.1
    beta: float = 0.001
    temperature: float = 2.0
    # the no-supervision ablations train on the transfer term alone
    include_scene_loss: bool = True

    def validate(self) -> None:
        if self.approach not in APPROACHES:
            raise ConfigError(f"unknown approach {self.approach!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")


@dataclass
class ExperimentConfig:
    # dataset
    scenes: int = 6
    events: int = 10
    pairs: int = 600
    class_decay: float = 0.7
    balance_low: int = 100
    balance_floor: int = 10
    image_size: int = 64
    visual_style: str = "varied"
    dataset_seed: int = 0
    # model
    feature_dim: int = 64
    image_depth: int = 4
    audio_depth: int = 5
    # objective
    loss: LossConfig = field(default_factory=LossConfig)
    # optimisation
    lr: float = 1e-4
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    modality_mask: str = "none"
    init: str = "pretrained_teacher"
    # teacher pretraining
    teacher_lr: float = 3e-3
    teacher_epochs: int = 30
    teacher_seed: int = 1234

    def validate(self) -> None:
        self.loss.validate()
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.lr <= 0 or self.weight_decay <= 0:
            raise ConfigError("lr and weight_decay must be > 0")
        if self.modality_mask not in MASKS:
            raise ConfigError(f"unknown modality_mask {self.modality_mask!r}")
        if self.visual_style not in ("varied", "blob_only"):
            raise ConfigError(f"unknown visual_style {self.visual_style!r}")
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        loss_raw = raw.pop("loss", {})
        known = {f.name for f in fields(ExperimentConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        loss_known = {f.name for f in fields(LossConfig)}
        bad = set(loss_raw) - loss_known
        if bad:
            raise ConfigError(f"unknown loss config keys: {sorted(bad)}")
        cfg = ExperimentConfig(loss=LossConfig(**loss_raw), **raw)
        cfg.validate()
        return cfg
