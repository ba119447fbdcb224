"""Noise schedule, forward diffusion, epsilon loss, classifier-free guidance and DDIM.

Latents are channels-last ``(B, F, H, W, C)`` tensors. Timesteps are integer
indices into a :class:`NoiseSchedule`, larger index meaning more noise. The
special index ``-1`` stands for the clean endpoint (alpha = 1, sigma = 0) and
is what the last DDIM step targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

CLEAN = -1


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep signal (alpha) and noise (sigma) coefficients, float64."""

    kind: str
    alphas: torch.Tensor
    sigmas: torch.Tensor

    @property
    def num_steps(self) -> int:
        return int(self.alphas.shape[0])

    def _check(self, t: int) -> None:
        if t != CLEAN and not 0 <= t < self.num_steps:
            raise ScheduleError(f"timestep {t} outside [0, {self.num_steps})")

    def alpha(self, t: int) -> float:
        self._check(t)
        return 1.0 if t == CLEAN else float(self.alphas[t])

    def sigma(self, t: int) -> float:
        self._check(t)
        return 0.0 if t == CLEAN else float(self.sigmas[t])

    def coefficients(self, t: torch.Tensor, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """Gather (alpha_t, sigma_t) for a batch of timestep indices, shaped for broadcasting on rank-5 latents."""
        t = t.long()
        if (t < 0).any() or (t >= self.num_steps).any():
            raise ScheduleError("timestep index out of range")
        a = self.alphas[t].to(dtype).view(-1, 1, 1, 1, 1)
        s = self.sigmas[t].to(dtype).view(-1, 1, 1, 1, 1)
        return a, s


def make_schedule(num_steps: int, kind: str = "cosine") -> NoiseSchedule:
    """Build a schedule whose signal coefficient decreases with t.

    ``cosine`` uses the squared-cosine cumulative signal curve with offset
    0.008; ``linear_alpha_bar`` makes alpha^2 fall linearly from 1 to 1e-3.
    Both end at alpha^2 = 1e-3: a smaller terminal alpha would make float32
    clean-latent recovery at the last step lose precision.
    """
    if not isinstance(num_steps, int) or num_steps < 2:
        raise ScheduleError(f"num_steps must be an integer >= 2, got {num_steps!r}")
    steps = torch.arange(num_steps, dtype=torch.float64)
    if kind == "cosine":
        s = 0.008
        f = torch.cos(((steps + 1) / num_steps + s) / (1 + s) * math.pi / 2) ** 2
        f0 = math.cos(s / (1 + s) * math.pi / 2) ** 2
        alpha_bar = (f / f0).clamp(min=1e-3, max=1.0)
    elif kind == "linear_alpha_bar":
        alpha_bar = 1.0 - (1.0 - 1e-3) * (steps + 1) / num_steps
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    alphas = alpha_bar.sqrt()
    # clamp guards the sqrt against -0.0 from rounding at alpha == 1
    sigmas = (1.0 - alphas**2).clamp(min=0.0).sqrt()
    return NoiseSchedule(kind=kind, alphas=alphas, sigmas=sigmas)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise a clean latent: alpha_t * z0 + sigma_t * eps.

    ``t`` may be a python int (shared by the batch) or a length-B tensor.
    """
    _same_shape(z0, eps, "forward_diffuse")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        a, s = schedule.coefficients(t, z0.dtype)
        return a * z0 + s * eps
    t = int(t)
    if t == CLEAN:
        raise ScheduleError("forward_diffuse needs a real timestep")
    return schedule.alpha(t) * z0 + schedule.sigma(t) * eps


def reconstruction_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element."""
    _same_shape(eps_pred, eps_true, "reconstruction_loss")
    return ((eps_pred - eps_true) ** 2).mean()


def cfg_predict(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    _same_shape(eps_cond, eps_uncond, "cfg_predict")
    if not math.isfinite(scale):
        raise ValueError("guidance scale must be finite")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> torch.Tensor:
    """One deterministic (eta = 0) DDIM update from t to t_prev."""
    _same_shape(z_t, eps_hat, "ddim_step")
    if t == CLEAN or (t_prev != CLEAN and t_prev >= t):
        raise ScheduleError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    a_t, s_t = schedule.alpha(t), schedule.sigma(t)
    if a_t == 0.0:
        raise ScheduleError(f"alpha is zero at t={t}")
    x0 = (z_t - s_t * eps_hat) / a_t
    return schedule.alpha(t_prev) * x0 + schedule.sigma(t_prev) * eps_hat


def ddim_timesteps(schedule: NoiseSchedule, num_steps: int) -> list[int]:
    """Descending, evenly spaced timesteps ending just above the clean endpoint."""
    if not 1 <= num_steps <= schedule.num_steps:
        raise ScheduleError(f"num_steps must lie in [1, {schedule.num_steps}]")
    ts = torch.linspace(schedule.num_steps - 1, 0, num_steps, dtype=torch.float64).round().long()
    return [int(x) for x in ts]


@torch.no_grad()
def sample(
    model,
    text_cond: torch.Tensor,
    null_cond: torch.Tensor,
    schedule: NoiseSchedule,
    shape,
    num_steps: int = 50,
    scale: float = 9.0,
    seed: int = 0,
    appearance: torch.Tensor | None = None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Classifier-free-guided DDIM sampling from a seeded Gaussian latent.

    ``model`` is any callable ``model(z, t, context, appearance=...)``; adapters
    attached to it take part in both the conditional and unconditional calls.
    """
    shape = tuple(shape)
    if len(shape) != 5 or any(int(d) <= 0 for d in shape):
        raise ValueError(f"latent shape must be 5 positive dims, got {shape}")
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
    steps = ddim_timesteps(schedule, num_steps)
    b = shape[0]
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else CLEAN
        tt = torch.full((b,), t, dtype=torch.long)
        eps_c = model(z, tt, text_cond, appearance=appearance)
        eps_u = model(z, tt, null_cond, appearance=appearance)
        z = ddim_step(z, cfg_predict(eps_c, eps_u, scale), t, t_prev, schedule)
    return z
