import pytest
import torch

from vidcustom.backbone import build_backbone
from vidcustom.data import SubjectDataset
from vidcustom.encoders import add_pseudo_word
from vidcustom.subject import (
    StageError, load_subject, save_subject, train_identity_adapter, train_subject, train_textual_identity,
)
from vidcustom.synthetic import subject_fixture
from vidcustom.training import FrozenBaseViolation, tensor_hashes
from vidcustom.unet import enumerate_layers

from conftest import tiny_config


def test_textual_identity_changes_only_its_row(tiny_backbone, tiny_cfg):
    bb = tiny_backbone
    frozen = tensor_hashes(bb.frozen_tensors())
    rows_before = bb.text.table.base.clone()
    ident = train_textual_identity(bb, subject_fixture(), tiny_cfg)
    assert tensor_hashes(bb.frozen_tensors()) == frozen
    rows = bb.text.table.rows()
    assert torch.equal(rows[: rows_before.shape[0]], rows_before)
    tid = bb.text.table.index["s*"]
    assert not torch.equal(rows[tid], rows[bb.text.table.index["dog"]])
    assert torch.equal(rows[tid], ident.embedding)
    assert not rows.requires_grad


def test_identity_adapter_stage(tiny_backbone, tiny_cfg):
    bb = tiny_backbone
    ident = train_textual_identity(bb, subject_fixture(), tiny_cfg)
    frozen = tensor_hashes(bb.frozen_tensors())
    aset = train_identity_adapter(bb, subject_fixture(), ident, tiny_cfg)
    assert tensor_hashes(bb.frozen_tensors()) == frozen
    cats = {a.path: a.category for a in enumerate_layers(bb.unet)}
    assert aset.plan.identity_targets and all(cats[p] == "cross_attention" for p in aset.plan.identity_targets)
    assert not any(m._forward_hooks for m in bb.unet.modules())
    assert any(torch.count_nonzero(ad.w_up) for ad in aset.identity.values())


def test_stage_refuses_attached_model(tiny_backbone, tiny_cfg):
    from vidcustom.subject import make_subject_adapters

    aset = make_subject_adapters(tiny_backbone, tiny_cfg).attach(tiny_backbone.unet)
    try:
        with pytest.raises(StageError):
            train_textual_identity(tiny_backbone, subject_fixture(), tiny_cfg)
    finally:
        aset.detach()


def test_frozen_drift_is_detected(tiny_backbone, tiny_cfg, monkeypatch):
    import vidcustom.subject as subject

    real = subject.optimize

    def drifting(params, *a, **k):
        out = real(params, *a, **k)
        with torch.no_grad():
            next(tiny_backbone.unet.parameters()).add_(1.0)
        return out

    monkeypatch.setattr(subject, "optimize", drifting)
    with pytest.raises(FrozenBaseViolation):
        train_textual_identity(tiny_backbone, subject_fixture(), tiny_cfg)


def test_prompt_must_contain_pseudo_word_once(tiny_backbone, tiny_cfg):
    ds = SubjectDataset(subject_fixture().images, "dog", prompt_template="a photo of a {class_word}")
    with pytest.raises(ValueError):
        train_textual_identity(tiny_backbone, ds, tiny_cfg)


def test_regular_word_cannot_be_overwritten(tiny_backbone, tiny_cfg):
    from vidcustom.subject import TextualIdentity, install_identity

    with pytest.raises(ValueError):
        install_identity(tiny_backbone.text, TextualIdentity("dog", "dog", torch.zeros(tiny_cfg.text_dim)))


def test_train_subject_is_deterministic_and_round_trips(tmp_path, tiny_cfg):
    a = train_subject(build_backbone(tiny_cfg, base=None), subject_fixture(), tiny_cfg)
    b = train_subject(build_backbone(tiny_cfg, base=None), subject_fixture(), tiny_cfg)
    assert torch.equal(a.identity.embedding, b.identity.embedding)
    ta, tb = a.adapters.tensors()[0], b.adapters.tensors()[0]
    assert all(torch.equal(ta[k], tb[k]) for k in ta)
    assert set(a.probes) == {"initial", "after_textual_identity", "final"}
    saved = save_subject(tmp_path / "subj", a, tiny_cfg)
    bb = build_backbone(tiny_cfg, base=None)
    loaded, h = load_subject(tmp_path / "subj", bb)
    assert h == saved.content_hash
    assert torch.equal(bb.text.table.rows()[bb.text.table.index["s*"]], a.identity.embedding)
    assert torch.equal(loaded.references, a.references)
    tl = loaded.adapters.tensors()[0]
    assert all(torch.equal(tl[k], ta[k]) for k in ta)


def test_lora_subject_variant(tiny_backbone):
    cfg = tiny_config(subject_adapter="lora", lora_rank=4)
    model = train_subject(tiny_backbone, subject_fixture(), cfg)
    assert model.adapters.lora and not model.adapters.identity
    assert all(".attn2." in p for p in model.adapters.plan.lora_targets)


def test_duplicate_pseudo_word_rejected(tiny_backbone, tiny_cfg):
    add_pseudo_word(tiny_backbone.text.table, "s*", "dog")
    with pytest.raises(ValueError):
        train_subject(tiny_backbone, subject_fixture(), tiny_cfg)
