"""Run configuration, presets and config-file loading."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import AU_NAMES, CLIP_LENGTH
from .encoder import DESK_PRESET, FULL_SCALE_PRESET, ConfigError, EncoderConfig
from .graph import STGLConfig

MODES = ("pretrain", "train", "eval", "predict")


@dataclass
class OptimConfig:
    """AdamW with linear warmup followed by cosine decay to ``min_lr_ratio * lr``."""

    lr: float = 1e-4
    weight_decay: float = 5e-4
    warmup_steps: int = 20
    steps: int = 500
    min_lr_ratio: float = 0.0
    betas: tuple = (0.9, 0.999)

    def __post_init__(self):
        self.betas = tuple(self.betas)


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(**DESK_PRESET))
    stgl: STGLConfig = field(default_factory=STGLConfig)
    # False skips graph learning altogether: AFG features go straight to the SC head
    use_stgl: bool = True
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    batch_size: int = 4
    clip_length: int = CLIP_LENGTH
    num_aus: int = len(AU_NAMES)
    threshold: float = 0.5
    mask_ratio: float = 0.75
    freeze_encoder: bool = False
    eval_every: int = 100
    seed: int = 0
    dataset: Optional[str] = None
    val_dataset: Optional[str] = None
    mode: str = "train"

    def validate(self):
        self.encoder.validate()
        if self.use_stgl:
            self.stgl.validate(self.num_aus, self.encoder.embed_dim)
        if self.optimizer.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.clip_length != CLIP_LENGTH:
            raise ConfigError(f"clip_length is fixed at {CLIP_LENGTH}")
        if self.stgl.max_len < self.clip_length:
            raise ConfigError("stgl.max_len must cover the clip length")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 1 <= self.num_aus <= len(AU_NAMES):
            raise ConfigError(f"num_aus must lie in [1, {len(AU_NAMES)}]")
        return self

    @property
    def au_names(self):
        return AU_NAMES[: self.num_aus]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        enc = EncoderConfig(**d.pop("encoder", {}))
        stgl = STGLConfig(**d.pop("stgl", {}))
        opt = OptimConfig(**d.pop("optimizer", {}))
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(encoder=enc, stgl=stgl, optimizer=opt, **d)


def desk_pretrain_config(**overrides):
    cfg = RunConfig(mode="pretrain", batch_size=16,
                    optimizer=OptimConfig(lr=1.5e-4, weight_decay=0.05, warmup_steps=20, steps=200))
    return dataclasses.replace(cfg, **overrides)


def desk_train_config(**overrides):
    cfg = RunConfig(mode="train", batch_size=4,
                    optimizer=OptimConfig(lr=1e-4, weight_decay=5e-4, warmup_steps=20, steps=500))
    return dataclasses.replace(cfg, **overrides)


def full_scale_config(mode="train"):
    """Published settings where stated. Batch size and step counts for detection are unpublished."""
    enc = EncoderConfig(**FULL_SCALE_PRESET)
    if mode == "pretrain":
        return RunConfig(encoder=enc, mode=mode, batch_size=512,
                         optimizer=OptimConfig(lr=1.5e-4, weight_decay=0.05))
    return RunConfig(encoder=enc, mode=mode, optimizer=OptimConfig(lr=1e-4, weight_decay=5e-4))


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def load_config(path, base: RunConfig | None = None):
    """Read a YAML (or JSON) file; its keys override ``base`` (default: desk training preset)."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping")
    base = base or desk_train_config()
    return RunConfig.from_dict(_merge(base.to_dict(), data))
