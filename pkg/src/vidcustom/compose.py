"""Inference: subject-only, motion-only, or composed generation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import Backbone
from .config import RunConfig
from .data import latent_to_pixels, read_frame
from .diffusion import sample
from .motion import MotionModel
from .storage import save_tensor, version_string, write_text_atomic
from .subject import SubjectModel


class GuidanceError(ValueError):
    pass


@dataclass
class Generation:
    video: torch.Tensor  # (F, H, W, C)
    metadata: dict


def check_pseudo_words(prompt: str, backbone: Backbone, subject: SubjectModel | None) -> None:
    """Every ``*``-suffixed word in the prompt must be a registered pseudo-word."""
    known = {subject.identity.word} if subject is not None else set()
    for word in prompt.lower().split():
        if word.endswith("*") and word not in known:
            raise KeyError(f"prompt uses pseudo-word {word!r} that no loaded subject defines")
    if subject is not None and prompt.lower().split().count(subject.identity.word) > 1:
        raise ValueError(f"prompt repeats {subject.identity.word!r}")


def resolve_guidance(guidance, subject: SubjectModel | None, seed: int, cfg: RunConfig):
    """Explicit image (path or latent frame) > random subject reference > none."""
    if guidance is not None:
        if isinstance(guidance, (str, Path)):
            return read_frame(guidance, cfg.latent_hw, cfg.latent_channels), str(guidance)
        return torch.as_tensor(guidance), "tensor"
    if subject is not None and subject.references.numel():
        gen = torch.Generator().manual_seed(seed)
        i = int(torch.randint(0, subject.references.shape[0], (1,), generator=gen))
        name = subject.reference_names[i] if i < len(subject.reference_names) else f"reference_{i}"
        return subject.references[i], f"subject_reference:{name}"
    return None, None


def generate(backbone: Backbone, prompt: str, cfg: RunConfig, seed: int = 0, subject: SubjectModel | None = None,
             motion: MotionModel | None = None, guidance=None, order=("subject", "motion"),
             hashes: dict | None = None) -> Generation:
    """Attach whichever adapter sets are given, sample once, detach.

    ``order`` only controls attachment order; adapters sit on disjoint
    sublayers so the result does not depend on it.
    """
    check_pseudo_words(prompt, backbone, subject)
    frame, guidance_id = resolve_guidance(guidance, subject, seed, cfg) if motion is not None else (None, None)
    if motion is not None and frame is None and cfg.strict:
        raise GuidanceError("motion adapters need a guidance image (pass one or load a subject with references)")
    dtype = next(backbone.unet.parameters()).dtype
    with torch.no_grad():
        text_cond = backbone.text.encode([prompt]).to(dtype)
        null_cond = backbone.text.null(1).to(dtype)
        appearance = backbone.image.encode_image(frame.to(dtype)) if frame is not None else None
    sets = {"subject": subject.adapters if subject else None, "motion": motion.adapters if motion else None}
    attached = []
    try:
        for name in order:
            if sets.get(name) is not None:
                sets[name].strict = cfg.strict
                attached.append(sets[name].attach(backbone.unet))
        shape = (1, cfg.frames, cfg.latent_h, cfg.latent_w, cfg.latent_channels)
        video = sample(backbone.unet, text_cond, null_cond, backbone.schedule, shape,
                       num_steps=cfg.sample_steps, scale=cfg.cfg_scale, seed=seed,
                       appearance=appearance, dtype=dtype)[0]
        fired = {}
        for aset in attached:
            fired.update(dict(aset.fired))
    finally:
        for aset in attached:
            aset.detach()
    families = [n for n in ("subject", "motion") if sets[n] is not None]
    metadata = {
        "prompt": prompt, "seed": seed, "families": families,
        "guidance_image": guidance_id, "adapter_hashes": dict(hashes or {}),
        "sample_steps": cfg.sample_steps, "cfg_scale": cfg.cfg_scale, "frames": cfg.frames,
        "fps": cfg.fps, "version": version_string(),
    }
    return Generation(video, metadata)


def compose(backbone, subject, motion, prompt, cfg, guidance=None, seed=0, hashes=None) -> Generation:
    return generate(backbone, prompt, cfg, seed, subject, motion, guidance, hashes=hashes)


def generate_subject_only(backbone, subject, prompt, cfg, seed=0, hashes=None) -> Generation:
    return generate(backbone, prompt, cfg, seed, subject=subject, hashes=hashes)


def generate_motion_only(backbone, motion, prompt, cfg, guidance=None, seed=0, hashes=None) -> Generation:
    return generate(backbone, prompt, cfg, seed, motion=motion, guidance=guidance, hashes=hashes)


def mean_frame_difference(video: torch.Tensor) -> float:
    """Mean absolute difference between consecutive frames."""
    return float((video[1:] - video[:-1]).abs().mean())


def write_generation(out_dir, gen: Generation, cfg: RunConfig, frames=True) -> Path:
    """``video.tensor`` + ``metadata.json`` sidecar (+ ``frames/*.png``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "video.tensor", gen.video.detach().float())
    meta = dict(gen.metadata, config=cfg.to_dict(), shape=list(gen.video.shape))
    if frames:
        fdir = out / "frames"
        fdir.mkdir(exist_ok=True)
        for i, f in enumerate(gen.video):
            Image.fromarray(np.ascontiguousarray(latent_to_pixels(f))).save(fdir / f"frame_{i:03d}.png")
        meta["frame_dump"] = "frames"
    write_text_atomic(out / "metadata.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out
