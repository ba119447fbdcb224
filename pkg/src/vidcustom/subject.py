"""Two-stage subject learning.

Stage 1 optimises a single pseudo-word embedding row (textual identity) with
everything else frozen. Stage 2 freezes that row and trains identity adapters
on the spatial cross-attention sublayers. Both stages see F = 1 batches drawn
with replacement from the subject images, with fresh noise and timesteps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .adapters import AdapterSet, PlacementPlan, lora_targets, make_identity_adapters, make_lora
from .backbone import Backbone
from .config import RunConfig
from .data import SubjectDataset
from .diffusion import forward_diffuse, reconstruction_loss
from .encoders import TextEncoder, add_pseudo_word
from .storage import load_checkpoint, save_checkpoint, tensor_sha256, version_string
from .training import JsonlLog, Probe, check_unchanged, optimize, tensor_hashes
from .unet import enumerate_layers

PROBE_SEED_OFFSET = 10007


class StageError(RuntimeError):
    """A training stage was started in the wrong state."""


@dataclass
class TextualIdentity:
    word: str
    init_token: str
    embedding: torch.Tensor  # (text_dim,)


@dataclass
class SubjectModel:
    identity: TextualIdentity
    adapters: AdapterSet
    references: torch.Tensor  # (N, H, W, C) training images
    class_word: str
    prompt_template: str
    probes: dict = field(default_factory=dict)
    reference_names: list = field(default_factory=list)


def ensure_unhooked(model) -> None:
    for name, mod in model.named_modules():
        if mod._forward_hooks:
            raise StageError(f"model already has adapters attached at {name or 'root'}")


def install_identity(text: TextEncoder, identity: TextualIdentity) -> int:
    """Register a learned pseudo-word row in ``text``, frozen."""
    table = text.table
    if identity.word in table.index:
        tid = table.index[identity.word]
        base = table.base.shape[0]
        if tid < base:
            raise ValueError(f"{identity.word!r} is a regular vocabulary word")
        row = table.pseudo[tid - base]
    else:
        tid, _ = add_pseudo_word(table, identity.word, identity.init_token)
        row = table.pseudo[-1]
    with torch.no_grad():
        row.copy_(identity.embedding.to(row.dtype))
    row.requires_grad_(False)
    return tid


def _pseudo_row(text: TextEncoder, word: str):
    tid = text.table.index[word]
    return tid, text.table.pseudo[tid - text.table.base.shape[0]]


def subject_plan(model, cfg: RunConfig) -> PlacementPlan:
    modes = {"cross_attention": cfg.cross_attn_mode, "self_attention": cfg.self_attn_mode,
             "feed_forward": cfg.ff_mode}
    if cfg.subject_adapter == "lora":
        return PlacementPlan(lora_targets=lora_targets(model, "subject"), modes=modes)
    targets = tuple(a.path for a in enumerate_layers(model) if a.category == "cross_attention")
    return PlacementPlan(identity_targets=targets, modes=modes)


def make_subject_adapters(backbone: Backbone, cfg: RunConfig) -> AdapterSet:
    model = backbone.unet
    plan = subject_plan(model, cfg)
    if cfg.subject_adapter == "lora":
        lora = make_lora(model, plan.lora_targets, cfg.lora_rank, seed=cfg.seed)
        return AdapterSet(plan, lora=lora, strict=cfg.strict)
    ident = make_identity_adapters(model, plan, seed=cfg.seed, hidden=cfg.adapter_hidden or None)
    return AdapterSet(plan, identity=ident, strict=cfg.strict)


def _batches(dataset: SubjectDataset, backbone: Backbone, batch: int, seed: int):
    images = dataset.images.to(next(backbone.unet.parameters()).dtype)
    gen = torch.Generator().manual_seed(seed)

    def draw():
        idx = torch.randint(0, len(dataset), (batch,), generator=gen)
        t = torch.randint(0, backbone.schedule.num_steps, (batch,), generator=gen)
        eps = torch.randn((batch, *images.shape[1:]), generator=gen, dtype=images.dtype)
        return forward_diffuse(images[idx], t, eps, backbone.schedule), t, eps

    return draw


def _check_dataset(dataset: SubjectDataset, word: str) -> str:
    if dataset is None or len(dataset) == 0:
        raise ValueError("subject dataset is empty")
    return dataset.prompt(word)


def train_textual_identity(backbone: Backbone, dataset: SubjectDataset, cfg: RunConfig,
                           log: JsonlLog | None = None) -> TextualIdentity:
    """Fit the pseudo-word row; returns the learned row.

    The word is added (initialised from the class word) unless it is already
    registered as a trainable pseudo-word.
    """
    prompt = _check_dataset(dataset, cfg.pseudo_word)
    ensure_unhooked(backbone.unet)
    text = backbone.text
    if cfg.pseudo_word not in text.table.index:
        add_pseudo_word(text.table, cfg.pseudo_word, dataset.class_word)
    tid, row = _pseudo_row(text, cfg.pseudo_word)
    row.requires_grad_(True)

    frozen = tensor_hashes(backbone.frozen_tensors())
    rows_before = text.table.rows().detach().clone()
    ids = text.tokenize([prompt] * cfg.subject_batch_size)
    draw = _batches(dataset, backbone, cfg.subject_batch_size, cfg.seed)

    def loss_fn(step):
        zt, t, eps = draw()
        ctx = text.encode_text(ids).embeddings
        return reconstruction_loss(backbone.unet(zt, t, ctx), eps)

    try:
        optimize([row], loss_fn, cfg.ti_iterations, cfg.ti_lr, log, stage="textual_identity")
    finally:
        row.requires_grad_(False)
    check_unchanged(frozen, tensor_hashes(backbone.frozen_tensors()))
    rows_after = text.table.rows().detach()
    others = torch.ones(rows_after.shape[0], dtype=torch.bool)
    others[tid] = False
    if not torch.equal(rows_before[others], rows_after[others]):
        raise StageError("a vocabulary row other than the pseudo-word changed")
    return TextualIdentity(cfg.pseudo_word, dataset.class_word, row.detach().clone())


def train_identity_adapter(backbone: Backbone, dataset: SubjectDataset, identity: TextualIdentity,
                           cfg: RunConfig, log: JsonlLog | None = None) -> AdapterSet:
    """Train identity adapters with the textual identity frozen; returns them detached."""
    prompt = _check_dataset(dataset, identity.word)
    ensure_unhooked(backbone.unet)
    install_identity(backbone.text, identity)
    if any(p.requires_grad for p in backbone.text.parameters()):
        raise StageError("text encoder has trainable rows during adapter training")
    aset = make_subject_adapters(backbone, cfg)
    aset.to(next(backbone.unet.parameters()).dtype)

    frozen = tensor_hashes(backbone.frozen_tensors())
    frozen_row = tensor_sha256(_pseudo_row(backbone.text, identity.word)[1])
    with torch.no_grad():
        ctx = backbone.text.encode(prompt).expand(cfg.subject_batch_size, -1, -1)
    draw = _batches(dataset, backbone, cfg.subject_batch_size, cfg.seed + 1)

    def loss_fn(step):
        zt, t, eps = draw()
        return reconstruction_loss(backbone.unet(zt, t, ctx), eps)

    aset.attach(backbone.unet)
    try:
        optimize(aset.parameters(), loss_fn, cfg.id_iterations, cfg.id_lr, log, stage="identity_adapter")
    finally:
        aset.detach()
    aset.requires_grad_(False)
    check_unchanged(frozen, tensor_hashes(backbone.frozen_tensors()))
    if tensor_sha256(_pseudo_row(backbone.text, identity.word)[1]) != frozen_row:
        raise StageError("textual identity changed during adapter training")
    return aset


def subject_probe(backbone: Backbone, dataset: SubjectDataset, cfg: RunConfig) -> Probe:
    return Probe.draw(cfg.probe_samples, len(dataset), tuple(dataset.images.shape[1:]),
                      backbone.schedule.num_steps, 1, cfg.seed + PROBE_SEED_OFFSET)


def probe_subject_loss(backbone, dataset, word, probe, adapters=None) -> float:
    dtype = next(backbone.unet.parameters()).dtype
    with torch.no_grad():
        ctx = backbone.text.encode(dataset.prompt(word)).expand(len(dataset), -1, -1)
    if adapters is None:
        return probe.loss(backbone, dataset.images.to(dtype), ctx)
    with adapters.attach(backbone.unet):
        return probe.loss(backbone, dataset.images.to(dtype), ctx)


def train_subject(backbone: Backbone, dataset: SubjectDataset, cfg: RunConfig,
                  log: JsonlLog | None = None) -> SubjectModel:
    """Both stages, with probe losses before, between and after."""
    _check_dataset(dataset, cfg.pseudo_word)
    add_pseudo_word(backbone.text.table, cfg.pseudo_word, dataset.class_word)
    probe = subject_probe(backbone, dataset, cfg)
    probes = {"initial": probe_subject_loss(backbone, dataset, cfg.pseudo_word, probe)}
    identity = train_textual_identity(backbone, dataset, cfg, log)
    probes["after_textual_identity"] = probe_subject_loss(backbone, dataset, cfg.pseudo_word, probe)
    adapters = train_identity_adapter(backbone, dataset, identity, cfg, log)
    probes["final"] = probe_subject_loss(backbone, dataset, cfg.pseudo_word, probe, adapters)
    return SubjectModel(identity, adapters, dataset.images[:, 0].clone(), dataset.class_word,
                        dataset.prompt_template, probes, list(dataset.names))


def save_subject(path, model: SubjectModel, cfg: RunConfig, extra_meta=None):
    tensors, roles = model.adapters.tensors()
    tensors["textual_identity.embedding"] = model.identity.embedding.detach().clone()
    roles["textual_identity.embedding"] = "textual_identity"
    for i, ref in enumerate(model.references):
        tensors[f"reference.{i:03d}"] = ref.detach().clone()
        roles[f"reference.{i:03d}"] = "reference_image"
    meta = {
        "kind": "subject", "version": version_string(), "seed": cfg.seed,
        "pseudo_word": model.identity.word, "init_token": model.identity.init_token,
        "class_word": model.class_word, "prompt_template": model.prompt_template,
        "plan": model.adapters.plan.to_dict(), "adapters": model.adapters.describe(),
        "adapter_kind": cfg.subject_adapter, "creation_seed": cfg.seed,
        "probes": model.probes, "reference_names": model.reference_names,
    }
    meta.update(extra_meta or {})
    return save_checkpoint(path, tensors, roles, cfg.to_dict(), meta)


def load_subject(path, backbone: Backbone, strict=False) -> tuple[SubjectModel, str]:
    """Load a subject checkpoint and register its pseudo-word in ``backbone``.

    Returns the model and the checkpoint's content hash.
    """
    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    if meta.get("kind") != "subject":
        raise ValueError(f"{path} is not a subject checkpoint")
    emb = ckpt.tensors["textual_identity.embedding"]
    if emb.shape[0] != backbone.text.dim:
        raise ValueError(f"textual identity width {emb.shape[0]} does not match text encoder width {backbone.text.dim}")
    identity = TextualIdentity(meta["pseudo_word"], meta["init_token"], emb)
    install_identity(backbone.text, identity)
    adapter_tensors = {k: v for k, v in ckpt.tensors.items()
                       if ckpt.roles[k] in ("identity_adapter", "lora")}
    aset = AdapterSet.from_tensors(PlacementPlan.from_dict(meta["plan"]), adapter_tensors, strict)
    aset.to(next(backbone.unet.parameters()).dtype)
    refs = ckpt.by_role("reference_image")
    references = torch.stack([refs[k] for k in sorted(refs)]) if refs else torch.empty(0)
    model = SubjectModel(identity, aset, references, meta["class_word"], meta["prompt_template"],
                         meta.get("probes", {}), meta.get("reference_names", []))
    return model, ckpt.content_hash
