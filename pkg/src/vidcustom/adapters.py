"""Identity adapter, motion adapter, LoRA, and how they hook into the UNet.

Adapters attach through forward hooks, so the base model's parameters and
module tree are never touched and :meth:`AdapterSet.detach` leaves no trace.

Placement modes for a wrapped sublayer ``f`` with input ``x``:

* parallel: ``f(x) + delta(x)``
* serial:   ``f(x) + delta(f(x))``, i.e. the adapter post-processes ``f(x)``

where ``delta`` is the bottleneck branch ``gelu(x @ W_down) @ W_up``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .unet import enumerate_layers, get_submodule

MODES = ("parallel", "serial")
FAMILY_ROLES = {"identity": "identity_adapter", "motion": "motion_adapter", "lora": "lora"}


def identity_forward(h, w_down, w_up):
    """h + gelu(h @ W_down) @ W_up over the trailing dimension."""
    if h.shape[-1] != w_down.shape[0] or w_up.shape != (w_down.shape[1], w_down.shape[0]):
        raise ValueError("identity adapter dimension mismatch")
    return h + F.gelu(h @ w_down) @ w_up


def motion_forward(h, e, w_down, w_up, w_cond):
    """Appearance-guided bottleneck on temporal states.

    ``h`` is (N, F, l); ``e`` is (N, cond_dim) or (N, 1, cond_dim) and is
    broadcast over every frame. The residual adds the original ``h``, not the
    appearance-shifted one.
    """
    if e.ndim == 2:
        e = e[:, None, :]
    if e.shape[-1] != w_cond.shape[0] or w_cond.shape[1] != h.shape[-1]:
        raise ValueError("motion adapter condition dimension mismatch")
    if h.shape[-1] != w_down.shape[0] or w_up.shape != (w_down.shape[1], w_down.shape[0]):
        raise ValueError("motion adapter dimension mismatch")
    he = h + e @ w_cond
    return h + F.gelu(he @ w_down) @ w_up


def lora_forward(x, weight, a, b):
    """x @ (W + A @ B) with ``weight`` laid out (in, out)."""
    if x.shape[-1] != weight.shape[0] or a.shape[0] != weight.shape[0] or b.shape[1] != weight.shape[1]:
        raise ValueError("LoRA dimension mismatch")
    return x @ (weight + a @ b)


def default_hidden(dim: int) -> int:
    return math.ceil(dim / 2)


class IdentityAdapter(nn.Module):
    def __init__(self, dim, hidden=None, generator=None, std=0.02):
        super().__init__()
        hidden = default_hidden(dim) if hidden is None else hidden
        if not 0 < hidden < dim:
            raise ValueError(f"bottleneck needs 0 < hidden < dim, got hidden={hidden}, dim={dim}")
        self.dim, self.hidden = dim, hidden
        self.w_down = nn.Parameter(torch.randn(dim, hidden, generator=generator) * std)
        self.w_up = nn.Parameter(torch.zeros(hidden, dim))

    def delta(self, h, e=None):
        return F.gelu(h @ self.w_down) @ self.w_up

    def forward(self, h):
        return identity_forward(h, self.w_down, self.w_up)


class MotionAdapter(IdentityAdapter):
    def __init__(self, dim, cond_dim, hidden=None, generator=None, std=0.02):
        super().__init__(dim, hidden, generator, std)
        self.cond_dim = cond_dim
        self.w_cond = nn.Parameter(torch.randn(cond_dim, dim, generator=generator) * std)

    def delta(self, h, e=None):
        if e is None:
            e = h.new_zeros(h.shape[0], 1, self.cond_dim)
        return F.gelu((h + e @ self.w_cond) @ self.w_down) @ self.w_up

    def forward(self, h, e):
        return motion_forward(h, e, self.w_down, self.w_up, self.w_cond)


class LoRALayer(nn.Module):
    def __init__(self, in_dim, out_dim, rank=32, generator=None):
        super().__init__()
        if not 0 < rank <= min(in_dim, out_dim):
            raise ValueError(f"LoRA rank {rank} must lie in (0, {min(in_dim, out_dim)}]")
        self.rank = rank
        self.a = nn.Parameter(torch.randn(in_dim, rank, generator=generator) / math.sqrt(in_dim))
        self.b = nn.Parameter(torch.zeros(rank, out_dim))

    def delta(self, x):
        return (x @ self.a) @ self.b


@dataclass
class PlacementPlan:
    """Which sublayers receive which adapter, and parallel/serial per family."""

    identity_targets: tuple = ()
    motion_targets: tuple = ()
    lora_targets: tuple = ()
    modes: dict = field(default_factory=lambda: {
        "cross_attention": "parallel", "self_attention": "parallel", "feed_forward": "parallel",
    })

    def mode_for(self, category: str) -> str:
        return self.modes.get(category, "parallel")

    def validate(self, model) -> None:
        layers = {a.path: a for a in enumerate_layers(model)}
        for path in self.identity_targets:
            a = layers.get(path)
            if a is None or a.category != "cross_attention" or a.domain != "spatial":
                raise ValueError(f"identity target {path!r} is not a spatial cross-attention layer")
        for path in self.motion_targets:
            a = layers.get(path)
            if a is None or a.domain != "temporal":
                raise ValueError(f"motion target {path!r} is not a temporal layer")
        for path in self.lora_targets:
            get_submodule(model, path)
        for cat, mode in self.modes.items():
            if mode not in MODES:
                raise ValueError(f"unknown placement mode {mode!r} for {cat}")

    def to_dict(self) -> dict:
        return {
            "identity_targets": list(self.identity_targets),
            "motion_targets": list(self.motion_targets),
            "lora_targets": list(self.lora_targets),
            "modes": dict(self.modes),
        }

    @classmethod
    def from_dict(cls, d) -> "PlacementPlan":
        return cls(tuple(d.get("identity_targets", ())), tuple(d.get("motion_targets", ())),
                   tuple(d.get("lora_targets", ())), dict(d["modes"]))


def default_plan(model, self_attn_mode="parallel", ff_mode="parallel", cross_mode="parallel") -> PlacementPlan:
    """Identity adapters on spatial cross-attention, motion adapters on every
    temporal-transformer attention and feed-forward sublayer."""
    layers = enumerate_layers(model)
    return PlacementPlan(
        identity_targets=tuple(a.path for a in layers if a.category == "cross_attention"),
        motion_targets=tuple(a.path for a in layers if a.domain == "temporal"
                             and a.category in ("self_attention", "feed_forward")),
        modes={"cross_attention": cross_mode, "self_attention": self_attn_mode, "feed_forward": ff_mode},
    )


def lora_targets(model, family: str) -> tuple:
    """K/V projections: spatial cross-attention for subjects, every attention layer for motion."""
    layers = enumerate_layers(model)
    if family == "subject":
        attn = [a.path for a in layers if a.category == "cross_attention"]
    elif family == "motion":
        attn = [a.path for a in layers if a.category in ("self_attention", "cross_attention")]
    else:
        raise ValueError(f"unknown LoRA family {family!r}")
    return tuple(f"{p}.{proj}" for p in attn for proj in ("to_k", "to_v"))


def _key(path: str) -> str:
    return path.replace(".", "/")


def _path(key: str) -> str:
    return key.replace("/", ".")


def _layer_width(model, path):
    layer = get_submodule(model, path)
    if hasattr(layer, "to_out"):
        return layer.to_out.out_features
    return layer.net[-1].out_features


def make_identity_adapters(model, plan: PlacementPlan, seed=0, hidden=None) -> nn.ModuleDict:
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    return nn.ModuleDict({
        _key(p): IdentityAdapter(_layer_width(model, p), hidden, gen).to(dtype) for p in plan.identity_targets
    })


def make_motion_adapters(model, plan: PlacementPlan, cond_dim: int, seed=0, hidden=None) -> nn.ModuleDict:
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    return nn.ModuleDict({
        _key(p): MotionAdapter(_layer_width(model, p), cond_dim, hidden, gen).to(dtype)
        for p in plan.motion_targets
    })


def make_lora(model, targets, rank=32, seed=0) -> nn.ModuleDict:
    gen = torch.Generator().manual_seed(seed)
    out = {}
    for p in targets:
        lin = get_submodule(model, p)
        out[_key(p)] = LoRALayer(lin.in_features, lin.out_features, rank, gen).to(lin.weight.dtype)
    return nn.ModuleDict(out)


class AdapterSet(nn.Module):
    """A bundle of adapters plus the hooks wiring them into one model."""

    def __init__(self, plan: PlacementPlan, identity=None, motion=None, lora=None, strict=False):
        super().__init__()
        self.plan = plan
        self.identity = identity if identity is not None else nn.ModuleDict()
        self.motion = motion if motion is not None else nn.ModuleDict()
        self.lora = lora if lora is not None else nn.ModuleDict()
        self.strict = strict
        self.fired = Counter()
        self._handles = []
        self._model = None

    @property
    def families(self) -> list[str]:
        return [n for n in ("identity", "motion", "lora") if len(getattr(self, n))]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def tensors(self) -> tuple[dict, dict]:
        """Named tensors and checkpoint roles for every adapter matrix."""
        tensors, roles = {}, {}
        for family, role in FAMILY_ROLES.items():
            for k, v in getattr(self, family).state_dict().items():
                tensors[f"{family}.{k}"] = v.detach().clone()
                roles[f"{family}.{k}"] = role
        return tensors, roles

    def describe(self) -> dict:
        """Per-target widths, for checkpoint manifests."""
        out = {}
        for family in ("identity", "motion"):
            for key, ad in getattr(self, family).items():
                out[_path(key)] = {"family": family, "l": ad.dim, "d": ad.hidden,
                                   **({"cond_dim": ad.cond_dim} if family == "motion" else {})}
        for key, lo in self.lora.items():
            out[_path(key)] = {"family": "lora", "in": lo.a.shape[0], "out": lo.b.shape[1], "rank": lo.rank}
        return out

    @classmethod
    def from_tensors(cls, plan: "PlacementPlan", tensors: dict, strict=False) -> "AdapterSet":
        """Rebuild adapters from checkpoint tensors; widths come from the stored shapes."""
        groups = {}
        for name, t in tensors.items():
            family, _, rest = name.partition(".")
            key, _, param = rest.rpartition(".")
            if family not in FAMILY_ROLES or not key:
                raise KeyError(f"unexpected adapter tensor {name!r}")
            groups.setdefault(family, {}).setdefault(key, {})[param] = t
        built = {f: nn.ModuleDict() for f in FAMILY_ROLES}
        for family, entries in groups.items():
            for key, p in entries.items():
                try:
                    if family == "identity":
                        mod = IdentityAdapter(*p["w_down"].shape)
                    elif family == "motion":
                        mod = MotionAdapter(p["w_down"].shape[0], p["w_cond"].shape[0], p["w_down"].shape[1])
                    else:
                        mod = LoRALayer(p["a"].shape[0], p["b"].shape[1], p["a"].shape[1])
                except KeyError as exc:
                    raise KeyError(f"adapter {family}.{key} lacks tensor {exc}") from None
                mod.load_state_dict(p)
                built[family][key] = mod.requires_grad_(False)
        return cls(plan, built["identity"], built["motion"], built["lora"], strict)

    def attach(self, model) -> "AdapterSet":
        if self._model is not None:
            raise RuntimeError("adapter set already attached")
        self.plan.validate(model)
        self._model = model
        try:
            for key, ad in self.identity.items():
                self._wire(model, _path(key), ad, "identity")
            for key, ad in self.motion.items():
                self._wire(model, _path(key), ad, "motion")
            for key, lo in self.lora.items():
                self._wire_lora(model, _path(key), lo)
        except Exception:
            self.detach()
            raise
        return self

    def detach(self) -> None:
        for h in self._handles:
            h.remove()
        self._handles = []
        self._model = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.detach()

    def _wire(self, model, path, adapter, family):
        layer = get_submodule(model, path)
        width = _layer_width(model, path)
        if adapter.dim != width:
            raise ValueError(f"adapter width {adapter.dim} does not match layer {path} width {width}")
        category = next(a.category for a in enumerate_layers(model) if a.path == path)
        mode = self.plan.mode_for(category)

        def hook(module, args, output):
            self.fired[path] += 1
            src = args[0] if mode == "parallel" else output
            e = self._appearance(src) if family == "motion" else None
            return output + adapter.delta(src, e)

        self._handles.append(layer.register_forward_hook(hook))

    def _wire_lora(self, model, path, lora):
        lin = get_submodule(model, path)
        if lora.a.shape[0] != lin.in_features or lora.b.shape[1] != lin.out_features:
            raise ValueError(f"LoRA shape does not match {path}")

        def hook(module, args, output):
            self.fired[path] += 1
            return output + lora.delta(args[0])

        self._handles.append(lin.register_forward_hook(hook))

    def _appearance(self, h):
        e = self._model.appearance
        if e is None:
            if self.strict:
                raise ValueError("motion adapter attached but no appearance embedding given")
            return None
        e = e.reshape(e.shape[0], 1, -1).to(h.dtype)
        if h.shape[0] % e.shape[0]:
            raise ValueError("appearance batch does not divide temporal batch")
        return e.repeat_interleave(h.shape[0] // e.shape[0], dim=0)


def attach(model, plan: PlacementPlan, identity=None, motion=None, lora=None, strict=False) -> AdapterSet:
    return AdapterSet(plan, identity, motion, lora, strict).attach(model)
