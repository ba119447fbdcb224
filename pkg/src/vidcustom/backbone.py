"""The frozen toy backbone: video UNet, text encoder, image encoder and schedule.

The default base weights ship with the package (``assets/toy_base``) and are
reproduced by :func:`pretrain_base` on the synthetic world.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import torch

from . import synthetic
from .config import RunConfig
from .diffusion import NoiseSchedule, forward_diffuse, make_schedule, reconstruction_loss
from .encoders import ImageEncoder, TextEncoder, load_vocabulary
from .storage import load_checkpoint, load_state_into, save_checkpoint, version_string
from .unet import VideoUNet, build_unet

MODEL_KEYS = ("base_channels", "channel_multipliers", "num_blocks", "attn_heads", "text_dim",
              "latent_channels", "frames", "latent_h", "latent_w", "model_seed")


@dataclass
class Backbone:
    cfg: RunConfig
    unet: VideoUNet
    text: TextEncoder
    image: ImageEncoder
    schedule: NoiseSchedule

    def frozen_tensors(self) -> dict:
        """Every base tensor that adapter training must leave untouched."""
        out = {f"unet.{k}": v for k, v in self.unet.state_dict().items()}
        out.update({f"text.{k}": v for k, v in self.text.state_dict().items() if not k.startswith("table.pseudo")})
        out.update({f"image.{k}": v for k, v in self.image.state_dict().items()})
        return out


def packaged_base() -> Path:
    return Path(str(resources.files("vidcustom").joinpath("assets", "toy_base")))


def build_backbone(cfg: RunConfig, base: str | Path | None = "default", dtype=torch.float32) -> Backbone:
    """Seeded modules, with base weights from ``base``.

    ``"default"`` means ``cfg.base_checkpoint`` if set, else the packaged toy
    base; ``None`` keeps the random initialisation.
    """
    unet = build_unet(cfg.unet_config(), seed=cfg.model_seed, dtype=dtype)
    words = load_vocabulary(cfg.vocab_file)
    text = TextEncoder(words, cfg.text_dim, cfg.attn_heads, cfg.max_tokens, seed=cfg.model_seed).to(dtype)
    image = ImageEncoder(cfg.latent_channels, cfg.latent_hw, cfg.cond_dim, seed=cfg.model_seed).to(dtype)
    schedule = make_schedule(cfg.num_train_steps, cfg.schedule_kind)
    if base == "default":
        base = cfg.base_checkpoint or packaged_base()
    if base is not None:
        load_base(unet, base, cfg)
    return Backbone(cfg, unet, text, image, schedule)


def load_base(unet: VideoUNet, path, cfg: RunConfig) -> None:
    ckpt = load_checkpoint(path)
    stored = ckpt.config
    clash = [k for k in MODEL_KEYS if k in stored and stored[k] != cfg.to_dict()[k]]
    if clash:
        raise ValueError(f"base checkpoint {path} was built with different model settings: {clash}")
    load_state_into(unet, ckpt.by_role("base"), prefix="unet.")


def pretrain_base(cfg: RunConfig, steps=None, lr=None, log=None, progress=None) -> VideoUNet:
    """Train the UNet on captioned images and clips from the synthetic world.

    Steps alternate between 8 single-frame images and 2 clips; a fraction of
    prompts is dropped to the empty string so classifier-free guidance works.
    """
    steps = cfg.pretrain_steps if steps is None else steps
    lr = cfg.pretrain_lr if lr is None else lr
    bb = build_backbone(cfg, base=None)
    model = bb.unet
    model.requires_grad_(True)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(steps, 1))
    gen = torch.Generator().manual_seed(cfg.seed)
    t0 = time.time()
    for it in range(steps):
        frames, batch = (1, 8) if it % 2 == 0 else (cfg.frames, 2)
        z0, prompts = synthetic.corpus_batch(batch, frames, gen)
        drop = torch.rand(batch, generator=gen) < cfg.pretrain_cond_dropout
        prompts = ["" if d else p for d, p in zip(drop.tolist(), prompts)]
        ctx = bb.text.encode(prompts)
        t = torch.randint(0, cfg.num_train_steps, (batch,), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        loss = reconstruction_loss(model(forward_diffuse(z0, t, eps, bb.schedule), t, ctx), eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if log is not None:
            log.write({"step": it, "loss": loss.item(), "lr": sched.get_last_lr()[0],
                       "wall_time": time.time() - t0})
        if progress and it % 500 == 0:
            progress(f"pretrain step {it}/{steps} loss {loss.item():.4f}")
    model.requires_grad_(False)
    model.eval()
    return model


def save_base(path, unet: VideoUNet, cfg: RunConfig, meta=None):
    tensors = {f"unet.{k}": v for k, v in unet.state_dict().items()}
    config = {k: cfg.to_dict()[k] for k in MODEL_KEYS}
    config.update(pretrain_steps=cfg.pretrain_steps, pretrain_lr=cfg.pretrain_lr, seed=cfg.seed)
    meta = {"kind": "base", "version": version_string(), **(meta or {})}
    return save_checkpoint(path, tensors, "base", config, meta)
