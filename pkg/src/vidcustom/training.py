"""Shared optimisation loop, JSONL logging, probe losses and freeze checks."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from .diffusion import forward_diffuse, reconstruction_loss
from .storage import tensor_sha256


class FrozenBaseViolation(RuntimeError):
    """A tensor that should be frozen changed during training."""


class JsonlLog:
    """Append-only JSON-lines training log; also kept in memory."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def adamw(params, lr):
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)


def optimize(params, loss_fn, iterations, lr, log=None, stage="train", on_checkpoint=None, checkpoint_every=0):
    """AdamW over ``params``; ``loss_fn(step)`` returns a scalar loss tensor."""
    params = list(params)
    if not params:
        raise ValueError("nothing to optimise")
    opt = adamw(params, lr)
    t0 = time.time()
    for step in range(iterations):
        loss = loss_fn(step)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at {stage} step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log is not None:
            log.write({"stage": stage, "step": step, "loss": loss.item(), "lr": lr,
                       "wall_time": round(time.time() - t0, 6)})
        if on_checkpoint and checkpoint_every and (step + 1) % checkpoint_every == 0:
            on_checkpoint(step + 1)


def tensor_hashes(tensors: dict) -> dict:
    return {k: tensor_sha256(v) for k, v in tensors.items()}


def check_unchanged(before: dict, after: dict, what="frozen") -> None:
    changed = sorted(k for k in before if before[k] != after.get(k))
    if changed or set(before) != set(after):
        raise FrozenBaseViolation(f"{what} tensors changed: {changed[:5]}")


@dataclass
class Probe:
    """A fixed set of (sample, timestep, noise, guidance frame) draws.

    Evaluating the denoising loss on the same draws before and after training
    gives a noise-free view of how far a stage has fitted its data.
    """

    index: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    frame: torch.Tensor

    @classmethod
    def draw(cls, n, num_items, shape, num_steps, frames, seed):
        g = torch.Generator().manual_seed(seed)
        index = torch.randint(0, num_items, (n,), generator=g)
        t = torch.randint(0, num_steps, (n,), generator=g)
        eps = torch.randn(n, *shape, generator=g)
        frame = torch.randint(0, frames, (n,), generator=g)
        return cls(index, t, eps, frame)

    @torch.no_grad()
    def loss(self, backbone, latents, contexts, appearance_of=None, chunk=16) -> float:
        """Mean loss; ``contexts`` is (items, tokens, dim), ``appearance_of(idx, frame)``
        maps draws to image embeddings when motion adapters are attached."""
        total, n = 0.0, self.t.shape[0]
        for s in range(0, n, chunk):
            sl = slice(s, min(s + chunk, n))
            idx = self.index[sl]
            z0 = latents[idx]
            eps = self.eps[sl].to(z0.dtype)
            zt = forward_diffuse(z0, self.t[sl], eps, backbone.schedule)
            app = appearance_of(idx, self.frame[sl]) if appearance_of else None
            pred = backbone.unet(zt, self.t[sl], contexts[idx], appearance=app)
            total += reconstruction_loss(pred, eps).item() * (sl.stop - sl.start)
        return total / n
