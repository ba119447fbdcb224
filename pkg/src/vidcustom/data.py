"""Datasets, ingestion from disk, and the pixel <-> latent stub."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .storage import load_tensor

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
TENSOR_SUFFIX = ".tensor"


@dataclass
class SubjectDataset:
    """3-5 images of one subject, each an F = 1 latent video."""

    images: torch.Tensor  # (N, 1, H, W, C)
    class_word: str
    prompt_template: str = "a photo of a {token} {class_word}"
    names: list = field(default_factory=list)

    def __post_init__(self):
        if self.images.ndim != 5 or self.images.shape[0] < 1 or self.images.shape[1] != 1:
            raise ValueError("subject dataset needs >= 1 image shaped (N, 1, H, W, C)")
        if not self.names:
            self.names = [f"image_{i:02d}" for i in range(self.images.shape[0])]

    def __len__(self):
        return self.images.shape[0]

    def prompt(self, token: str) -> str:
        text = self.prompt_template.format(token=token, class_word=self.class_word)
        if text.lower().split().count(token.lower()) != 1:
            raise ValueError(f"prompt {text!r} must contain the pseudo-word exactly once")
        return text


@dataclass
class MotionDataset:
    videos: list  # each (F, H, W, C)
    captions: list
    names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.videos:
            raise ValueError("motion dataset is empty")
        if len(self.captions) != len(self.videos) or any(not c.strip() for c in self.captions):
            raise ValueError("every motion video needs a non-empty caption")
        frames = {v.shape[0] for v in self.videos}
        if len(frames) != 1:
            raise ValueError(f"videos disagree on frame count: {sorted(frames)}")
        if frames.pop() < 2:
            raise ValueError("motion videos need at least 2 frames")
        if not self.names:
            self.names = [f"video_{i:02d}" for i in range(len(self.videos))]

    @property
    def mode(self) -> str:
        return "single_video" if len(self.videos) == 1 else "multi_video"

    @property
    def frames(self) -> int:
        return self.videos[0].shape[0]

    def stacked(self) -> torch.Tensor:
        return torch.stack(self.videos)


def pixels_to_latent(img: np.ndarray, channels: int = 4) -> torch.Tensor:
    """uint8 (2H, 2W, 3) -> float (H, W, C) via [-1, 1] scaling and 2x2 average pooling.

    Latent channels cycle through (R, G, B, gray).
    """
    x = torch.from_numpy(np.asarray(img, dtype=np.float64) / 127.5 - 1.0)
    if x.ndim == 2:
        x = x[..., None].expand(-1, -1, 3)
    x = x[..., :3]
    if x.shape[0] % 2 or x.shape[1] % 2:
        raise ValueError("pixel frame needs even height and width")
    planes = torch.cat([x, x.mean(-1, keepdim=True)], dim=-1)
    pooled = F.avg_pool2d(planes.permute(2, 0, 1)[None], 2)[0].permute(1, 2, 0)
    return pooled[..., [i % 4 for i in range(channels)]].float()


def latent_to_pixels(latent: torch.Tensor) -> np.ndarray:
    """float (H, W, C) -> uint8 (2H, 2W, 3) or (2H, 2W) for single-channel latents."""
    x = latent.detach().to(torch.float64).clamp(-1, 1)
    x = x[..., :3] if x.shape[-1] >= 3 else x[..., :1]
    x = x.repeat_interleave(2, 0).repeat_interleave(2, 1)
    out = np.round((x.numpy() + 1.0) * 127.5).astype(np.uint8)
    return out[..., 0] if out.shape[-1] == 1 else out


def read_frame(path, hw, channels) -> torch.Tensor:
    """An image file (through the pixel stub) or a latent tensor container."""
    path = Path(path)
    if path.suffix == TENSOR_SUFFIX:
        t = load_tensor(path).float()
    elif path.suffix.lower() in IMAGE_SUFFIXES:
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")
                target = (2 * hw[1], 2 * hw[0])
                if im.size != target:
                    im = im.resize(target, Image.BILINEAR)
                arr = np.asarray(im)
        except OSError as exc:
            raise ValueError(f"unreadable frame {path}: {exc}") from exc
        t = pixels_to_latent(arr, channels)
    else:
        raise ValueError(f"unsupported frame file {path}")
    if tuple(t.shape) != (*hw, channels):
        raise ValueError(f"frame {path} has shape {tuple(t.shape)}, expected {(*hw, channels)}")
    return t


def _frame_files(directory: Path) -> list[Path]:
    files = [p for p in directory.iterdir()
             if p.is_file() and (p.suffix.lower() in IMAGE_SUFFIXES or p.suffix == TENSOR_SUFFIX)]
    return sorted(files, key=lambda p: p.name)


def stride_indices(n: int, frames: int) -> list[int]:
    if n < frames:
        raise ValueError(f"clip has {n} frames, need at least {frames}")
    return [i * n // frames for i in range(frames)]


def ingest_subject(directory, hw, channels, class_word, prompt_template=None) -> SubjectDataset:
    directory = Path(directory)
    files = _frame_files(directory) if directory.is_dir() else []
    if not files:
        raise ValueError(f"no subject images in {directory}")
    imgs = torch.stack([read_frame(p, hw, channels) for p in files])[:, None]
    kw = {} if prompt_template is None else {"prompt_template": prompt_template}
    return SubjectDataset(imgs, class_word, names=[p.stem for p in files], **kw)


def read_video(path, hw, channels) -> torch.Tensor:
    """A frame directory, a generation directory holding ``video.tensor``, or a
    rank-4 (F, H, W, C) tensor container."""
    path = Path(path)
    if path.is_dir() and (path / "video.tensor").is_file():
        path = path / "video.tensor"
    if path.is_file():
        v = load_tensor(path).float()
        if v.ndim != 4 or tuple(v.shape[1:]) != (*hw, channels):
            raise ValueError(f"video container {path} has shape {tuple(v.shape)}")
        return v
    files = _frame_files(path)
    if not files:
        raise ValueError(f"no frames in {path}")
    return torch.stack([read_frame(p, hw, channels) for p in files])


def read_tsv(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("\t")
        if not sep:
            raise ValueError(f"line without a tab in {path}: {line!r}")
        out[key.strip()] = value.strip()
    return out


def ingest_motion(directory, frames, hw, channels, captions_file="captions.txt") -> MotionDataset:
    """Each subdirectory (or ``.tensor`` file) is one video; captions come from a
    ``video_id<TAB>caption`` file in the root."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValueError(f"{directory} is not a directory")
    entries = sorted((p for p in directory.iterdir() if p.is_dir() or p.suffix == TENSOR_SUFFIX),
                     key=lambda p: p.name)
    if not entries:
        raise ValueError(f"no videos in {directory}")
    caps_path = directory / captions_file
    captions = read_tsv(caps_path) if caps_path.is_file() else {}
    videos, caps, names = [], [], []
    for entry in entries:
        vid_id = entry.stem if entry.is_file() else entry.name
        if vid_id not in captions:
            raise ValueError(f"missing caption for video {vid_id!r}")
        v = read_video(entry, hw, channels)
        videos.append(v[stride_indices(v.shape[0], frames)])
        caps.append(captions[vid_id])
        names.append(vid_id)
    return MotionDataset(videos, caps, names)
