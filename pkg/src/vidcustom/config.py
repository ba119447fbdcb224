"""Flat run configuration.

Defaults carry the full-scale training hyperparameters (AdamW betas
0.9/0.999, eps 1e-8, no weight decay; textual identity lr 1e-4 for 3000
steps; identity adapter lr 1e-5 for 800 steps; motion adapter lr 1e-5 for
1000 steps; batch 4 for subjects, 2/1 for multi/single-video motion; 50 DDIM
steps at guidance scale 9.0; 8 fps). :meth:`RunConfig.toy` swaps in the
desk-scale learning rates that make the miniature model converge within the
same iteration budget.

Precedence is CLI flag > config file > built-in default. Environment
variables are never consulted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2)
    num_blocks: int = 1
    attn_heads: int = 4
    text_dim: int = 64
    latent_channels: int = 4
    frames: int = 8
    latent_h: int = 8
    latent_w: int = 8
    cond_dim: int = 32
    max_tokens: int = 16
    model_seed: int = 0
    base_checkpoint: str | None = None
    vocab_file: str | None = None
    # noise schedule
    num_train_steps: int = 1000
    schedule_kind: str = "cosine"
    # backbone pretraining on the synthetic corpus
    pretrain_steps: int = 8000
    pretrain_lr: float = 2e-3
    pretrain_cond_dropout: float = 0.1
    # subject learning
    ti_lr: float = 1e-4
    ti_iterations: int = 3000
    id_lr: float = 1e-5
    id_iterations: int = 800
    subject_batch_size: int = 4
    prompt_template: str = "a photo of a {token} {class_word}"
    class_word: str = "dog"
    pseudo_word: str = "s*"
    # motion learning; batch 0 means 1 for a single video, 2 for several
    motion_lr: float = 1e-5
    motion_iterations: int = 1000
    motion_batch_size: int = 0
    # adapters; hidden 0 means half the layer width
    adapter_hidden: int = 0
    cross_attn_mode: str = "parallel"
    self_attn_mode: str = "parallel"
    ff_mode: str = "parallel"
    lora_rank: int = 32
    # "adapter" or "lora" for the adapter vs LoRA comparison
    subject_adapter: str = "adapter"
    motion_adapter: str = "adapter"
    # weight-change analysis fine-tune
    analysis_lr: float = 1e-5
    analysis_iterations: int = 200
    # sampling
    sample_steps: int = 50
    cfg_scale: float = 9.0
    fps: int = 8
    strict: bool = False
    # bookkeeping
    seed: int = 0
    probe_samples: int = 64
    checkpoint_every: int = 0

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        for name in ("cross_attn_mode", "self_attn_mode", "ff_mode"):
            if getattr(self, name) not in ("parallel", "serial"):
                raise ConfigError(f"{name} must be 'parallel' or 'serial'")
        for name in ("subject_adapter", "motion_adapter"):
            if getattr(self, name) not in ("adapter", "lora"):
                raise ConfigError(f"{name} must be 'adapter' or 'lora'")
        if self.schedule_kind not in ("cosine", "linear_alpha_bar"):
            raise ConfigError(f"unknown schedule_kind {self.schedule_kind!r}")
        for name in ("ti_lr", "id_lr", "motion_lr", "pretrain_lr", "analysis_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("ti_iterations", "id_iterations", "motion_iterations", "analysis_iterations"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @classmethod
    def toy(cls, **overrides) -> "RunConfig":
        """Desk-scale preset: same iteration budgets, larger learning rates, motion batch 4."""
        base = dict(ti_iterations=500, ti_lr=5e-2, id_lr=1e-2, motion_lr=1e-2, motion_batch_size=4,
                    analysis_lr=1e-3, analysis_iterations=200)
        base.update(overrides)
        return cls(**base)

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            base_channels=self.base_channels, channel_multipliers=self.channel_multipliers,
            num_blocks=self.num_blocks, attn_heads=self.attn_heads, text_dim=self.text_dim,
            latent_channels=self.latent_channels, frames=self.frames,
            latent_hw=(self.latent_h, self.latent_w),
        )

    @property
    def latent_hw(self) -> tuple:
        return (self.latent_h, self.latent_w)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    def updated(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        d = json.loads(Path(path).read_text())
        preset = d.pop("preset", None)
        if preset == "toy":
            return cls.toy(**d)
        if preset not in (None, "full"):
            raise ConfigError(f"unknown preset {preset!r}")
        return cls.from_dict(d)


def parse_override(cfg: RunConfig, item: str) -> RunConfig:
    """Apply one ``key=value`` override; the value is parsed as JSON when possible."""
    key, sep, raw = item.partition("=")
    if not sep:
        raise ConfigError(f"override {item!r} is not key=value")
    known = {f.name: f for f in fields(RunConfig)}
    if key not in known:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return replace(cfg, **{key: value})
