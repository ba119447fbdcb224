"""A tiny procedural latent world used to pretrain the toy backbone and to
build subject/motion fixtures.

Objects are soft super-ellipse blobs with a class-specific shape and a colour
vector, composited over a flat background and moved along a motion-specific
trajectory. Everything lives directly in latent space (H, W, C).
"""

from __future__ import annotations

import math

import torch

from .data import MotionDataset, SubjectDataset

COLORS = {
    "red": (1.0, -0.5, -0.5, 0.3),
    "green": (-0.5, 1.0, -0.5, 0.3),
    "blue": (-0.5, -0.5, 1.0, 0.3),
    "yellow": (0.8, 0.8, -0.6, 0.5),
    "white": (0.8, 0.8, 0.8, 1.0),
    "black": (-0.8, -0.8, -0.8, -1.0),
    "brown": (0.5, 0.1, -0.3, 0.2),
}
BACKGROUNDS = {
    "grass": (-0.2, 0.3, -0.2, 0.0),
    "beach": (0.3, 0.2, -0.1, 0.2),
    "snow": (0.3, 0.3, 0.3, 0.4),
    "street": (-0.3, -0.3, -0.3, -0.2),
}
# (radius x, radius y, super-ellipse exponent)
CLASSES = {
    "dog": (1.6, 1.6, 2.0),
    "cat": (1.2, 1.2, 4.0),
    "bear": (2.2, 2.2, 2.0),
    "car": (2.4, 1.0, 2.0),
    "bird": (1.0, 1.0, 2.0),
}
MOTIONS = ("running", "walking", "jumping", "turning", "sitting")
SCALE = 1.5


def blob(cls: str, cx: float, cy: float, hw=(8, 8)) -> torch.Tensor:
    rx, ry, p = CLASSES[cls]
    yy, xx = torch.meshgrid(torch.arange(hw[0]).float(), torch.arange(hw[1]).float(), indexing="ij")
    d = ((xx - cx) / rx).abs() ** p + ((yy - cy) / ry).abs() ** p
    return torch.exp(-0.5 * d)


def trajectory(motion: str, f: int, frames: int, x0: float, y0: float) -> tuple:
    u = f / max(frames - 1, 1)
    if motion == "running":
        return x0 + 4 * u, y0
    if motion == "walking":
        return x0 + 2 * u, y0
    if motion == "jumping":
        return x0, y0 - 2 * abs(math.sin(2 * math.pi * u))
    if motion == "turning":
        return x0 - 3 * u, y0
    if motion == "sitting":
        return x0, y0
    raise ValueError(f"unknown motion {motion!r}")


def texture(amplitude=1.0, hw=(8, 8)) -> torch.Tensor:
    """A fixed high-frequency pattern that makes a subject harder to describe in words."""
    yy, xx = torch.meshgrid(torch.arange(hw[0]).float(), torch.arange(hw[1]).float(), indexing="ij")
    return amplitude * torch.stack([torch.sin(1.6 * xx), torch.cos(1.6 * yy),
                                    torch.sin(1.1 * (xx + yy)), torch.cos(xx - yy)], -1)


def _vec(c):
    return torch.tensor(c, dtype=torch.float32) if not isinstance(c, torch.Tensor) else c.float()


def composite(cls, color, background, centres, tex=None, hw=(8, 8)) -> torch.Tensor:
    """Render one frame per (cx, cy) centre -> (F, H, W, 4)."""
    app = _vec(COLORS[color] if isinstance(color, str) else color)
    bg = _vec(BACKGROUNDS[background] if isinstance(background, str) else background)
    obj = app if tex is None else app + tex
    frames = []
    for cx, cy in centres:
        m = blob(cls, cx, cy, hw)[..., None]
        frames.append(m * obj + (1 - m) * bg)
    return torch.stack(frames) * SCALE


def render(cls, color, background, motion, frames, x0, y0, tex=None, hw=(8, 8)) -> torch.Tensor:
    centres = [trajectory(motion, f, frames, x0, y0) for f in range(frames)]
    return composite(cls, color, background, centres, tex, hw)


def corpus_batch(batch: int, frames: int, generator: torch.Generator):
    """Random captioned images (frames == 1) or clips from the world."""
    cls_l, col_l, bg_l = list(CLASSES), list(COLORS), list(BACKGROUNDS)

    def pick(seq):
        return seq[int(torch.randint(0, len(seq), (1,), generator=generator))]

    latents, prompts = [], []
    for _ in range(batch):
        cls, col, bg = pick(cls_l), pick(col_l), pick(bg_l)
        y0 = 2 + 4 * float(torch.rand(1, generator=generator))
        if frames == 1:
            x0 = 1.5 + 4 * float(torch.rand(1, generator=generator))
            latents.append(render(cls, col, bg, "sitting", 1, x0, y0))
            prompts.append(f"a photo of a {col} {cls} on the {bg}")
        else:
            mo = pick(MOTIONS)
            x0 = 1.5 + 2 * float(torch.rand(1, generator=generator))
            latents.append(render(cls, col, bg, mo, frames, x0, y0))
            prompts.append(f"a {col} {cls} {mo} on the {bg}")
    return torch.stack(latents), prompts


SUBJECT_POSITIONS = ((3.0, 3.5), (4.0, 3.5), (3.0, 4.5), (4.5, 4.0))


def subject_fixture(n_images=4, class_word="dog", color="red", tex_amplitude=0.0) -> SubjectDataset:
    """One dog on grass seen at a few positions.

    The class prompt leaves colour and background open, which is what the
    pseudo-word and the identity adapters have to pick up.
    """
    tex = texture(tex_amplitude) if tex_amplitude else None
    imgs = torch.stack([composite(class_word, color, "grass", [SUBJECT_POSITIONS[i % 4]], tex)
                        for i in range(n_images)])
    return SubjectDataset(imgs, class_word)


def zigzag_centres(frames=8):
    return [(2 + 4 * f / (frames - 1), 4 + 1.5 * math.sin(f * math.pi / 2)) for f in range(frames)]


def motion_fixture(frames=8, tex_amplitude=1.0) -> MotionDataset:
    """One textured bear walking along a zig-zag path."""
    video = composite("bear", "brown", "grass", zigzag_centres(frames), texture(tex_amplitude))
    return MotionDataset([video], ["a bear walking on the grass"], ["zigzag"])


def multi_motion_fixture(frames=8, tex_amplitude=1.0) -> MotionDataset:
    """Three differently coloured bears sharing the zig-zag motion."""
    tex = texture(tex_amplitude)
    vids = [composite("bear", col, bg, zigzag_centres(frames), tex)
            for col, bg in (("brown", "grass"), ("white", "snow"), ("black", "beach"))]
    caps = ["a brown bear walking on the grass", "a white bear walking on the snow",
            "a black bear walking on the beach"]
    return MotionDataset(vids, caps, ["zigzag_brown", "zigzag_white", "zigzag_black"])
