"""Miniature 3D UNet noise predictor.

Every UNet layer is spatiotemporal conv -> spatial transformer (self-attn,
cross-attn over text, feed-forward) -> temporal transformer (self-attn,
feed-forward). Hidden states travel channels-last as ``(B, F, h, w, l)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

CATEGORIES = ("cross_attention", "self_attention", "feed_forward", "other")
DOMAINS = ("spatial", "temporal")


@dataclass
class UNetConfig:
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2)
    num_blocks: int = 1
    attn_heads: int = 4
    text_dim: int = 64
    latent_channels: int = 4
    frames: int = 8
    latent_hw: tuple = (8, 8)
    norm_groups: int = 8

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.latent_hw = tuple(int(x) for x in self.latent_hw)
        for w in self.widths:
            if w % self.attn_heads:
                raise ValueError(f"width {w} not divisible by attn_heads={self.attn_heads}")

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["latent_hw"] = list(self.latent_hw)
        return d


@dataclass(frozen=True)
class LayerAddress:
    path: str
    category: str
    domain: str
    params: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.category not in CATEGORIES or self.domain not in DOMAINS:
            raise ValueError(f"bad address {self}")
        if self.category == "cross_attention" and self.domain != "spatial":
            raise ValueError("cross-attention only exists in the spatial domain")


def reshape_spatial(x: torch.Tensor) -> torch.Tensor:
    """(B, F, h, w, l) -> (B*F, h*w, l)."""
    if x.ndim != 5:
        raise ValueError(f"expected rank-5 hidden state, got rank {x.ndim}")
    b, f, h, w, l = x.shape
    return x.reshape(b * f, h * w, l)


def unshape_spatial(x: torch.Tensor, b: int, f: int, h: int, w: int) -> torch.Tensor:
    return x.reshape(b, f, h, w, x.shape[-1])


def reshape_temporal(x: torch.Tensor) -> torch.Tensor:
    """(B, F, h, w, l) -> (B*h*w, F, l)."""
    if x.ndim != 5:
        raise ValueError(f"expected rank-5 hidden state, got rank {x.ndim}")
    b, f, h, w, l = x.shape
    return x.permute(0, 2, 3, 1, 4).reshape(b * h * w, f, l)


def unshape_temporal(x: torch.Tensor, b: int, f: int, h: int, w: int) -> torch.Tensor:
    return x.reshape(b, h, w, f, x.shape[-1]).permute(0, 3, 1, 2, 4)


def sinusoidal(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class Attention(nn.Module):
    """Multi-head attention; cross-attention when ``context_dim`` is given."""

    def __init__(self, dim, heads, context_dim=None, causal=False):
        super().__init__()
        self.heads = heads
        self.is_cross = context_dim is not None
        self.causal = causal
        kv_dim = context_dim if self.is_cross else dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        ctx = x if context is None else context
        n, tq, dim = x.shape
        hd = dim // self.heads
        q = self.to_q(x).view(n, tq, self.heads, hd).transpose(1, 2)
        k = self.to_k(ctx).view(n, ctx.shape[1], self.heads, hd).transpose(1, 2)
        v = self.to_v(ctx).view(n, ctx.shape[1], self.heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if self.causal:
            mask = torch.ones(tq, ctx.shape[1], dtype=torch.bool).triu(1)
            scores = scores.masked_fill(mask, float("-inf"))
        out = scores.softmax(-1) @ v
        return self.to_out(out.transpose(1, 2).reshape(n, tq, dim))


class FeedForward(nn.Module):
    def __init__(self, dim, mult=4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)


class TemporalConv(nn.Module):
    """Residual 1D convolution along frames."""

    def __init__(self, channels, groups):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.conv = nn.Conv1d(channels, channels, 3, padding=1)

    def forward(self, x):
        b, f, h, w, c = x.shape
        y = x.permute(0, 2, 3, 4, 1).reshape(b * h * w, c, f)
        y = self.conv(F.silu(self.norm(y)))
        return x + y.reshape(b, h, w, c, f).permute(0, 4, 1, 2, 3)


def _conv2d(conv, x):
    b, f, h, w, c = x.shape
    y = conv(x.reshape(b * f, h, w, c).permute(0, 3, 1, 2))
    return y.permute(0, 2, 3, 1).reshape(b, f, y.shape[2], y.shape[3], y.shape[1])


def _groupnorm(norm, x):
    b, f, h, w, c = x.shape
    y = norm(x.reshape(b * f, h * w, c).transpose(1, 2))
    return y.transpose(1, 2).reshape(b, f, h, w, c)


class SpatioTemporalConv(nn.Module):
    """2D spatial conv + timestep injection, followed by a 1D temporal conv."""

    def __init__(self, in_ch, out_ch, temb_dim, groups):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Linear(in_ch, out_ch) if in_ch != out_ch else nn.Identity()
        self.temporal = TemporalConv(out_ch, groups)

    def forward(self, x, temb):
        h = _conv2d(self.conv1, F.silu(_groupnorm(self.norm1, x)))
        h = h + self.temb_proj(F.silu(temb))[:, None, None, None, :]
        h = _conv2d(self.conv2, F.silu(_groupnorm(self.norm2, h)))
        return self.temporal(self.skip(x) + h)


class SpatialTransformer(nn.Module):
    def __init__(self, dim, heads, context_dim, groups):
        super().__init__()
        self.norm_in = nn.GroupNorm(groups, dim)
        self.proj_in = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = Attention(dim, heads, context_dim=context_dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)
        self.proj_out = nn.Linear(dim, dim)

    def forward(self, x, context):
        b, f, h, w, _ = x.shape
        s = reshape_spatial(self.proj_in(_groupnorm(self.norm_in, x)))
        ctx = context.repeat_interleave(f, dim=0)
        s = s + self.attn1(self.norm1(s))
        s = s + self.attn2(self.norm2(s), ctx)
        s = s + self.ff(self.norm3(s))
        return x + self.proj_out(unshape_spatial(s, b, f, h, w))


class TemporalTransformer(nn.Module):
    def __init__(self, dim, heads, groups):
        super().__init__()
        self.norm_in = nn.GroupNorm(groups, dim)
        self.proj_in = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim)
        self.proj_out = nn.Linear(dim, dim)

    def forward(self, x):
        b, f, h, w, dim = x.shape
        s = reshape_temporal(self.proj_in(_groupnorm(self.norm_in, x)))
        s = s + sinusoidal(torch.arange(f), dim).to(s.dtype)[None]
        s = s + self.attn1(self.norm1(s))
        s = s + self.ff(self.norm2(s))
        return x + self.proj_out(unshape_temporal(s, b, f, h, w))


class UNetLayer(nn.Module):
    def __init__(self, in_ch, out_ch, cfg: UNetConfig, temb_dim):
        super().__init__()
        self.conv = SpatioTemporalConv(in_ch, out_ch, temb_dim, cfg.norm_groups)
        self.spatial = SpatialTransformer(out_ch, cfg.attn_heads, cfg.text_dim, cfg.norm_groups)
        self.temporal = TemporalTransformer(out_ch, cfg.attn_heads, cfg.norm_groups)

    def forward(self, x, temb, context):
        return self.temporal(self.spatial(self.conv(x, temb), context))


class VideoUNet(nn.Module):
    """eps-prediction network over ``(B, F, H, W, C)`` latents."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths
        temb_dim = 4 * cfg.base_channels
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim)
        )
        self.conv_in = nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skip_widths = []
        ch = widths[0]
        for i, w in enumerate(widths):
            level = nn.ModuleList()
            for _ in range(cfg.num_blocks):
                level.append(UNetLayer(ch, w, cfg, temb_dim))
                ch = w
                skip_widths.append(ch)
            self.down.append(level)
            if i < len(widths) - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(widths))):
            level = nn.ModuleList()
            for _ in range(cfg.num_blocks):
                level.append(UNetLayer(ch + skip_widths.pop(), widths[i], cfg, temb_dim))
                ch = widths[i]
            self.up.append(level)
            if i > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = nn.GroupNorm(cfg.norm_groups, ch)
        self.conv_out = nn.Conv2d(ch, cfg.latent_channels, 3, padding=1)
        # appearance embedding visible to motion-adapter hooks during forward
        self.appearance = None

    def forward(self, z, t, context, appearance=None):
        cfg = self.cfg
        if z.ndim != 5 or tuple(z.shape[2:]) != (*cfg.latent_hw, cfg.latent_channels):
            raise ValueError(f"latent shape {tuple(z.shape)} does not match config")
        b = z.shape[0]
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((b,), int(t), dtype=torch.long)
        temb = self.time_mlp(sinusoidal(t, cfg.base_channels).to(z.dtype))
        self.appearance = appearance
        try:
            x = _conv2d(self.conv_in, z)
            skips = []
            for i, level in enumerate(self.down):
                for layer in level:
                    x = layer(x, temb, context)
                    skips.append(x)
                if i < len(self.downsample):
                    x = _conv2d(self.downsample[i], x)
            for i, level in enumerate(self.up):
                for layer in level:
                    x = layer(torch.cat([x, skips.pop()], dim=-1), temb, context)
                if i < len(self.upsample):
                    bb, f, h, w, c = x.shape
                    x = x.reshape(bb * f, h, w, c).permute(0, 3, 1, 2)
                    x = F.interpolate(x, scale_factor=2, mode="nearest")
                    x = x.permute(0, 2, 3, 1).reshape(bb, f, 2 * h, 2 * w, c)
                    x = _conv2d(self.upsample[i], x)
            return _conv2d(self.conv_out, F.silu(_groupnorm(self.norm_out, x)))
        finally:
            self.appearance = None


def build_unet(cfg: UNetConfig, seed: int = 0, dtype=torch.float32) -> VideoUNet:
    """Seeded, frozen base model."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = VideoUNet(cfg)
    model.to(dtype)
    model.requires_grad_(False)
    model.eval()
    return model


def enumerate_layers(model: VideoUNet) -> list[LayerAddress]:
    """Partition the base parameters into categorised sublayer addresses.

    Weight matrices of each attention or feed-forward module form one address;
    their biases, and every other module that directly owns parameters, become
    ``other`` addresses.
    Anything inside a temporal transformer or temporal conv is temporal.
    """
    out = []
    skip_prefixes = []
    for name, mod in model.named_modules():
        if any(name.startswith(p) for p in skip_prefixes):
            continue
        domain = "temporal" if _is_temporal(model, name) else "spatial"
        if isinstance(mod, Attention):
            cat = "cross_attention" if mod.is_cross else "self_attention"
        elif isinstance(mod, FeedForward):
            cat = "feed_forward"
        else:
            own = [n for n, _ in mod.named_parameters(recurse=False)]
            if own:
                out.append(LayerAddress(name, "other", domain, tuple(f"{name}.{n}" for n in own)))
            continue
        skip_prefixes.append(name + ".")
        named = [(f"{name}.{n}", p) for n, p in mod.named_parameters()]
        out.append(LayerAddress(name, cat, domain, tuple(n for n, p in named if p.ndim >= 2)))
        biases = tuple(n for n, p in named if p.ndim < 2)
        if biases:
            out.append(LayerAddress(f"{name}:bias", "other", domain, biases))
    return out


def _is_temporal(model, name) -> bool:
    if not name:
        return False
    parts = name.split(".")
    return any(
        isinstance(model.get_submodule(".".join(parts[: i + 1])), (TemporalTransformer, TemporalConv))
        for i in range(len(parts))
    )


def get_submodule(model: nn.Module, path: str) -> nn.Module:
    try:
        return model.get_submodule(path)
    except AttributeError as exc:
        raise KeyError(f"no layer {path!r} in model") from exc


def domain_parameters(model: VideoUNet, domain: str) -> list[str]:
    return [p for a in enumerate_layers(model) if a.domain == domain for p in a.params]
