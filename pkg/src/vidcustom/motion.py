"""Motion-adapter training with appearance guidance.

Each step samples video(s), picks one frame per sample uniformly at random,
encodes it with the frozen image encoder and feeds the embedding to every
motion adapter. Captions are plain descriptions; no subject artefacts are
involved, so motion and subject training stay decoupled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .adapters import AdapterSet, PlacementPlan, lora_targets, make_lora, make_motion_adapters
from .backbone import Backbone
from .config import RunConfig
from .data import MotionDataset
from .diffusion import forward_diffuse, reconstruction_loss
from .storage import load_checkpoint, save_checkpoint, version_string
from .subject import PROBE_SEED_OFFSET, ensure_unhooked
from .training import JsonlLog, Probe, check_unchanged, optimize, tensor_hashes
from .unet import enumerate_layers


@dataclass
class MotionModel:
    adapters: AdapterSet
    captions: list
    mode: str
    probes: dict = field(default_factory=dict)


def guidance_index(frames: int, generator: torch.Generator) -> int:
    """Uniform frame index in [0, frames)."""
    if frames < 1:
        raise ValueError("cannot select a guidance frame from an empty video")
    return int(torch.randint(0, frames, (1,), generator=generator))


def select_guidance_frame(video: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """One uniformly chosen raw frame (H, W, C) of ``video`` (F, H, W, C)."""
    return video[guidance_index(video.shape[0], generator)]


def motion_plan(model, cfg: RunConfig) -> PlacementPlan:
    modes = {"cross_attention": cfg.cross_attn_mode, "self_attention": cfg.self_attn_mode,
             "feed_forward": cfg.ff_mode}
    if cfg.motion_adapter == "lora":
        return PlacementPlan(lora_targets=lora_targets(model, "motion"), modes=modes)
    targets = tuple(a.path for a in enumerate_layers(model)
                    if a.domain == "temporal" and a.category in ("self_attention", "feed_forward"))
    return PlacementPlan(motion_targets=targets, modes=modes)


def make_motion_set(backbone: Backbone, cfg: RunConfig) -> AdapterSet:
    model = backbone.unet
    plan = motion_plan(model, cfg)
    if cfg.motion_adapter == "lora":
        return AdapterSet(plan, lora=make_lora(model, plan.lora_targets, cfg.lora_rank, seed=cfg.seed),
                          strict=cfg.strict)
    ads = make_motion_adapters(model, plan, cfg.cond_dim, seed=cfg.seed, hidden=cfg.adapter_hidden or None)
    return AdapterSet(plan, motion=ads, strict=cfg.strict)


def motion_batch_size(dataset: MotionDataset, cfg: RunConfig) -> int:
    if cfg.motion_batch_size:
        return cfg.motion_batch_size
    return 1 if dataset.mode == "single_video" else 2


def _contexts(backbone, dataset):
    with torch.no_grad():
        return backbone.text.encode(list(dataset.captions))


def train_motion_adapter(backbone: Backbone, dataset: MotionDataset, cfg: RunConfig,
                         log: JsonlLog | None = None, adapters: AdapterSet | None = None) -> AdapterSet:
    """Train motion adapters on a frozen backbone; returns them detached."""
    if dataset.frames != cfg.frames:
        raise ValueError(f"videos have {dataset.frames} frames, model expects {cfg.frames}")
    ensure_unhooked(backbone.unet)
    dtype = next(backbone.unet.parameters()).dtype
    aset = adapters if adapters is not None else make_motion_set(backbone, cfg)
    aset.to(dtype)
    videos = dataset.stacked().to(dtype)
    contexts = _contexts(backbone, dataset)
    batch = motion_batch_size(dataset, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    frozen = tensor_hashes(backbone.frozen_tensors())

    def loss_fn(step):
        idx = torch.randint(0, len(dataset.videos), (batch,), generator=gen)
        t = torch.randint(0, backbone.schedule.num_steps, (batch,), generator=gen)
        eps = torch.randn((batch, *videos.shape[1:]), generator=gen, dtype=dtype)
        frames = torch.stack([select_guidance_frame(videos[i], gen) for i in idx.tolist()])
        e = backbone.image.encode_image(frames)
        zt = forward_diffuse(videos[idx], t, eps, backbone.schedule)
        return reconstruction_loss(backbone.unet(zt, t, contexts[idx], appearance=e), eps)

    aset.attach(backbone.unet)
    try:
        optimize(aset.parameters(), loss_fn, cfg.motion_iterations, cfg.motion_lr, log, stage="motion_adapter")
    finally:
        aset.detach()
    aset.requires_grad_(False)
    check_unchanged(frozen, tensor_hashes(backbone.frozen_tensors()))
    return aset


def motion_probe(backbone: Backbone, dataset: MotionDataset, cfg: RunConfig) -> Probe:
    return Probe.draw(cfg.probe_samples, len(dataset.videos), tuple(dataset.videos[0].shape),
                      backbone.schedule.num_steps, dataset.frames, cfg.seed + PROBE_SEED_OFFSET)


def probe_motion_loss(backbone, dataset, probe, adapters) -> float:
    dtype = next(backbone.unet.parameters()).dtype
    videos = dataset.stacked().to(dtype)
    contexts = _contexts(backbone, dataset)

    def appearance_of(idx, frame):
        return backbone.image.encode_image(videos[idx, frame])

    with adapters.attach(backbone.unet):
        return probe.loss(backbone, videos, contexts, appearance_of, chunk=8)


def train_motion(backbone: Backbone, dataset: MotionDataset, cfg: RunConfig,
                 log: JsonlLog | None = None) -> MotionModel:
    """Train with probe losses measured before and after."""
    aset = make_motion_set(backbone, cfg)
    probe = motion_probe(backbone, dataset, cfg)
    probes = {"initial": probe_motion_loss(backbone, dataset, probe, aset)}
    aset = train_motion_adapter(backbone, dataset, cfg, log, adapters=aset)
    probes["final"] = probe_motion_loss(backbone, dataset, probe, aset)
    return MotionModel(aset, list(dataset.captions), dataset.mode, probes)


def save_motion(path, model: MotionModel, cfg: RunConfig, extra_meta=None):
    tensors, roles = model.adapters.tensors()
    meta = {
        "kind": "motion", "version": version_string(), "seed": cfg.seed, "mode": model.mode,
        "captions": model.captions, "plan": model.adapters.plan.to_dict(),
        "adapters": model.adapters.describe(), "adapter_kind": cfg.motion_adapter,
        "cond_dim": cfg.cond_dim, "creation_seed": cfg.seed, "probes": model.probes,
    }
    meta.update(extra_meta or {})
    return save_checkpoint(path, tensors, roles, cfg.to_dict(), meta)


def load_motion(path, backbone: Backbone, strict=False) -> tuple[MotionModel, str]:
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    if meta.get("kind") != "motion":
        raise ValueError(f"{path} is not a motion checkpoint")
    if meta.get("cond_dim", backbone.image.cond_dim) != backbone.image.cond_dim:
        raise ValueError(f"motion checkpoint expects cond_dim {meta['cond_dim']}, "
                         f"image encoder gives {backbone.image.cond_dim}")
    aset = AdapterSet.from_tensors(PlacementPlan.from_dict(meta["plan"]), ckpt.tensors, strict)
    aset.to(next(backbone.unet.parameters()).dtype)
    return MotionModel(aset, meta.get("captions", []), meta.get("mode", ""), meta.get("probes", {})), ckpt.content_hash
