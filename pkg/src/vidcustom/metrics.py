"""CLIP-T / CLIP-I / DINO-I / temporal-consistency metrics with pluggable embedders.

Real CLIP or DINO models can be plugged in by implementing the
:class:`EmbeddingProvider` protocol; the defaults are seeded frozen random
projections so the metric code runs anywhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np


class EmbeddingProvider(Protocol):
    name: str

    def image_embed(self, frame) -> np.ndarray: ...

    def text_embed(self, prompt: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("cannot normalise a zero or non-finite embedding")
    return v / n


def cosine(a, b) -> float:
    return float(np.dot(_unit(a), _unit(b)))


def _stable_seed(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


class RandomProjectionProvider:
    """Image: flatten -> fixed Gaussian projection -> normalise.
    Text: sum of per-token random vectors -> fixed projection -> normalise."""

    def __init__(self, name="rp-clip", dim=64, seed=0, token_dim=64):
        self.name = name
        self.dim = dim
        self.seed = seed
        self.token_dim = token_dim
        self._text_proj = np.random.default_rng(_stable_seed(seed, "text")).standard_normal((token_dim, dim))
        self._image_proj = {}

    def _proj(self, size):
        if size not in self._image_proj:
            rng = np.random.default_rng(_stable_seed(self.seed, "image", size))
            self._image_proj[size] = rng.standard_normal((size, self.dim)) / np.sqrt(size)
        return self._image_proj[size]

    def image_embed(self, frame) -> np.ndarray:
        x = np.asarray(frame, dtype=np.float64).ravel()
        return _unit(x @ self._proj(x.size))

    def text_embed(self, prompt: str) -> np.ndarray:
        tokens = prompt.lower().split()
        if not tokens:
            raise ValueError("empty prompt")
        bag = sum(np.random.default_rng(_stable_seed(self.seed, "tok", t)).standard_normal(self.token_dim)
                  for t in tokens)
        return _unit(bag @ self._text_proj)


def default_providers(seed=0) -> dict:
    return {"clip": RandomProjectionProvider("rp-clip", seed=seed),
            "dino": RandomProjectionProvider("rp-dino", seed=seed + 1000)}


def _frames(video):
    frames = list(video)
    if not frames:
        raise ValueError("video has no frames")
    return frames


def clip_t(frames, prompt: str, provider) -> float:
    """Mean cosine between every frame's image embedding and the prompt's text embedding."""
    frames = _frames(frames)
    text = provider.text_embed(prompt)
    return float(np.mean([cosine(provider.image_embed(f), text) for f in frames]))


def clip_i(frames, references, provider) -> float:
    """Mean cosine over every (generated frame, reference image) pair."""
    frames = _frames(frames)
    refs = list(references)
    if not refs:
        raise ValueError("no reference images")
    fe = np.stack([_unit(provider.image_embed(f)) for f in frames])
    re = np.stack([_unit(provider.image_embed(r)) for r in refs])
    return float(np.mean(fe @ re.T))


def dino_i(frames, references, provider) -> float:
    return clip_i(frames, references, provider)


def temporal_consistency(frames, provider) -> float:
    """Mean cosine between embeddings of consecutive frames."""
    frames = _frames(frames)
    if len(frames) < 2:
        raise ValueError("temporal consistency needs at least 2 frames")
    emb = [provider.image_embed(f) for f in frames]
    return float(np.mean([cosine(a, b) for a, b in zip(emb[:-1], emb[1:])]))


@dataclass
class MetricsRecord:
    video_id: str
    prompt: str
    clip_t: float
    clip_i: float
    dino_i: float
    temporal_consistency: float
    frames: int
    references: int


def evaluate_video(video_id, frames, prompt, references, providers) -> MetricsRecord:
    frames = _frames(frames)
    return MetricsRecord(
        video_id, prompt,
        clip_t(frames, prompt, providers["clip"]),
        clip_i(frames, references, providers["clip"]),
        dino_i(frames, references, providers["dino"]),
        temporal_consistency(frames, providers["clip"]),
        len(frames), len(references),
    )


def aggregate(records) -> dict:
    if not records:
        raise ValueError("no records to aggregate")
    keys = ("clip_t", "clip_i", "dino_i", "temporal_consistency")
    return {k: float(np.mean([getattr(r, k) for r in records])) for k in keys}


def evaluate_run(videos_dir, prompts_file, references_dir, providers=None, hw=(8, 8), channels=4):
    """One record per video found in ``videos_dir`` plus aggregate means."""
    from .data import _frame_files, read_frame, read_tsv, read_video

    providers = providers or default_providers()
    prompts = read_tsv(prompts_file)
    vdir = Path(videos_dir)
    entries = sorted((p for p in vdir.iterdir()
                      if p.is_dir() or (p.suffix == ".tensor" and p.name != "references.tensor")),
                     key=lambda p: p.name)
    if not entries:
        raise ValueError(f"no videos in {vdir}")
    refs = [read_frame(p, hw, channels).numpy() for p in _frame_files(Path(references_dir))]
    records = []
    for entry in entries:
        vid = entry.stem if entry.is_file() else entry.name
        if vid not in prompts:
            raise ValueError(f"no prompt for video {vid!r}")
        video = read_video(entry, hw, channels).numpy()
        records.append(evaluate_video(vid, video, prompts[vid], refs, providers))
    return records, aggregate(records)


def format_report(records, agg, providers=None) -> str:
    """Text table followed by a JSON block; deterministic byte-for-byte."""
    lines = [f"{'video':<20} {'CLIP-T':>8} {'CLIP-I':>8} {'DINO-I':>8} {'T.Cons':>8}"]
    for r in records:
        lines.append(f"{r.video_id:<20} {r.clip_t:8.4f} {r.clip_i:8.4f} {r.dino_i:8.4f} "
                     f"{r.temporal_consistency:8.4f}")
    lines.append(f"{'mean':<20} {agg['clip_t']:8.4f} {agg['clip_i']:8.4f} {agg['dino_i']:8.4f} "
                 f"{agg['temporal_consistency']:8.4f}")
    payload = {
        "records": [asdict(r) for r in records],
        "aggregate": agg,
        "metadata": {
            "clip_i_reduction": "mean over all (frame, reference) pairs",
            "providers": {k: getattr(v, "name", type(v).__name__) for k, v in (providers or {}).items()},
        },
    }
    return "\n".join(lines) + "\n\n" + json.dumps(payload, indent=2, sort_keys=True) + "\n"
