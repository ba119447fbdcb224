"""Per-layer weight-change rates between a base model and a fine-tuned copy."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch

from .unet import CATEGORIES, LayerAddress


class FreezeViolation(RuntimeError):
    """A parameter outside the analysed domain changed."""


class UndefinedChangeRate(ValueError):
    """The baseline layer has zero norm."""


def weight_change_rate(theta, theta_prime) -> float:
    """||theta' - theta||_2 / ||theta||_2 over the flattened parameters."""
    theta = torch.as_tensor(theta, dtype=torch.float64).flatten()
    theta_prime = torch.as_tensor(theta_prime, dtype=torch.float64).flatten()
    if theta.shape != theta_prime.shape:
        raise ValueError("parameter shapes differ")
    base = torch.linalg.vector_norm(theta)
    if base == 0:
        raise UndefinedChangeRate("baseline parameters have zero norm")
    return float(torch.linalg.vector_norm(theta_prime - theta) / base)


@dataclass
class AnalysisReport:
    domain: str
    per_layer: list  # (LayerAddress, delta or None)
    per_category_mean: dict
    metadata: dict = field(default_factory=dict)

    def category_counts(self) -> dict:
        counts = {c: 0 for c in CATEGORIES}
        for addr, _ in self.per_layer:
            counts[addr.category] += 1
        return {c: n for c, n in counts.items() if n}

    def ranking(self) -> list[str]:
        return sorted(self.per_category_mean, key=lambda c: -self.per_category_mean[c])

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "per_category_mean": self.per_category_mean,
            "per_layer": [
                {"path": a.path, "category": a.category, "domain": a.domain, "delta": d}
                for a, d in self.per_layer
            ],
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"weight change rate, {self.domain} parameters", "", f"{'category':<18} {'layers':>6} {'mean':>12}"]
        counts = self.category_counts()
        for cat in CATEGORIES:
            if cat in self.per_category_mean:
                lines.append(f"{cat:<18} {counts[cat]:>6} {self.per_category_mean[cat]:>12.6e}")
        lines += ["", f"{'layer':<40} {'category':<18} {'delta':>12}"]
        for a, d in self.per_layer:
            val = "undefined" if d is None else f"{d:.6e}"
            lines.append(f"{a.path:<40} {a.category:<18} {val:>12}")
        return "\n".join(lines) + "\n"


def _check_structure(before: dict, after: dict) -> None:
    if set(before) != set(after):
        diff = sorted(set(before) ^ set(after))
        raise ValueError(f"checkpoints differ structurally: {diff[:5]}")
    for k in before:
        if tuple(before[k].shape) != tuple(after[k].shape):
            raise ValueError(f"shape mismatch for {k}")


def analyze(before: dict, after: dict, layers: list[LayerAddress], domain: str, metadata=None) -> AnalysisReport:
    """Change rates for every layer in ``domain``; everything else must be bit-identical."""
    if domain not in ("spatial", "temporal"):
        raise ValueError(f"unknown domain {domain!r}")
    _check_structure(before, after)
    per_layer, undefined = [], []
    for addr in layers:
        if addr.domain != domain:
            for p in addr.params:
                if not torch.equal(before[p], after[p]):
                    raise FreezeViolation(f"out-of-domain parameter {p} changed")
            continue
        theta = torch.cat([before[p].flatten().double() for p in addr.params])
        theta_prime = torch.cat([after[p].flatten().double() for p in addr.params])
        try:
            delta = weight_change_rate(theta, theta_prime)
        except UndefinedChangeRate:
            delta = None
            undefined.append(addr.path)
        per_layer.append((addr, delta))
    means = {}
    for cat in CATEGORIES:
        vals = [d for a, d in per_layer if a.category == cat and d is not None]
        if vals:
            means[cat] = sum(vals) / len(vals)
    meta = {"mean": "unweighted arithmetic mean over layers", "undefined_layers": undefined,
            "undefined_count": len(undefined)}
    meta.update(metadata or {})
    return AnalysisReport(domain, per_layer, means, meta)


def fine_tune_for_analysis(backbone, dataset, domain: str, cfg, log=None) -> tuple[dict, dict]:
    """Fully fine-tune one parameter domain on a copy of the base UNet.

    Subject datasets train on their images with the plain class prompt,
    motion datasets on their clips and captions. Returns ``(before, after)``
    state dicts; the complementary domain is checked to be bit-identical.
    """
    import copy

    from .data import MotionDataset
    from .diffusion import forward_diffuse, reconstruction_loss
    from .training import optimize
    from .unet import domain_parameters

    if domain not in ("spatial", "temporal"):
        raise ValueError(f"unknown domain {domain!r}")
    model = copy.deepcopy(backbone.unet)
    before = {k: v.detach().clone() for k, v in model.state_dict().items()}
    names = set(domain_parameters(model, domain))
    params = []
    for n, p in model.named_parameters():
        p.requires_grad_(n in names)
        if n in names:
            params.append(p)
    dtype = params[0].dtype
    if isinstance(dataset, MotionDataset):
        latents, prompts = dataset.stacked(), list(dataset.captions)
        batch = 1 if dataset.mode == "single_video" else 2
    else:
        latents = dataset.images
        prompt = " ".join(dataset.prompt_template.format(token="", class_word=dataset.class_word).split())
        prompts = [prompt] * len(dataset)
        batch = cfg.subject_batch_size
    latents = latents.to(dtype)
    with torch.no_grad():
        contexts = backbone.text.encode(prompts).to(dtype)
    gen = torch.Generator().manual_seed(cfg.seed)
    model.train()

    def loss_fn(step):
        idx = torch.randint(0, latents.shape[0], (batch,), generator=gen)
        t = torch.randint(0, backbone.schedule.num_steps, (batch,), generator=gen)
        eps = torch.randn((batch, *latents.shape[1:]), generator=gen, dtype=dtype)
        zt = forward_diffuse(latents[idx], t, eps, backbone.schedule)
        return reconstruction_loss(model(zt, t, contexts[idx]), eps)

    if cfg.analysis_iterations:
        optimize(params, loss_fn, cfg.analysis_iterations, cfg.analysis_lr, log, stage=f"{domain}_fine_tune")
    model.requires_grad_(False)
    model.eval()
    after = {k: v.detach().clone() for k, v in model.state_dict().items()}
    for k in before:
        if k not in names and not torch.equal(before[k], after[k]):
            raise FreezeViolation(f"parameter {k} outside the {domain} domain changed")
    return before, after
