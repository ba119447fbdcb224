import pytest
import torch
from scipy.stats import chisquare

from vidcustom.backbone import build_backbone
from vidcustom.data import MotionDataset
from vidcustom.motion import (
    guidance_index, load_motion, make_motion_set, motion_batch_size, save_motion, select_guidance_frame,
    train_motion, train_motion_adapter,
)
from vidcustom.synthetic import motion_fixture, multi_motion_fixture
from vidcustom.training import tensor_hashes
from vidcustom.unet import enumerate_layers

from conftest import tiny_config


def test_guidance_frame_frequencies():
    g = torch.Generator().manual_seed(0)
    counts = torch.bincount(torch.tensor([guidance_index(8, g) for _ in range(80_000)]), minlength=8)
    freqs = counts.double() / counts.sum()
    assert torch.all((freqs >= 0.115) & (freqs <= 0.135)), freqs


def test_guidance_frame_chi_square():
    g = torch.Generator().manual_seed(1)
    video = torch.arange(8, dtype=torch.float32)[:, None, None, None].expand(8, 2, 2, 1)
    picks = [int(select_guidance_frame(video, g)[0, 0, 0]) for _ in range(10_000)]
    counts = torch.bincount(torch.tensor(picks), minlength=8).tolist()
    assert chisquare(counts).pvalue > 0.01
    with pytest.raises(ValueError):
        guidance_index(0, g)


def test_batch_size_rules():
    cfg = tiny_config()
    assert motion_batch_size(motion_fixture(4), cfg) == 1
    assert motion_batch_size(multi_motion_fixture(4), cfg) == 2
    assert motion_batch_size(motion_fixture(4), cfg.updated(motion_batch_size=3)) == 3


def test_motion_adapters_live_in_temporal_layers(tiny_backbone, tiny_cfg):
    aset = make_motion_set(tiny_backbone, tiny_cfg)
    layers = {a.path: a for a in enumerate_layers(tiny_backbone.unet)}
    cats = {layers[p].category for p in aset.plan.motion_targets}
    assert cats == {"self_attention", "feed_forward"}
    assert all(layers[p].domain == "temporal" for p in aset.plan.motion_targets)


def test_training_keeps_base_frozen(tiny_backbone, tiny_cfg):
    frozen = tensor_hashes(tiny_backbone.frozen_tensors())
    aset = train_motion_adapter(tiny_backbone, motion_fixture(4), tiny_cfg)
    assert tensor_hashes(tiny_backbone.frozen_tensors()) == frozen
    assert not any(m._forward_hooks for m in tiny_backbone.unet.modules())
    assert any(torch.count_nonzero(ad.w_up) for ad in aset.motion.values())


def test_frame_count_mismatch(tiny_backbone, tiny_cfg):
    with pytest.raises(ValueError, match="frames"):
        train_motion_adapter(tiny_backbone, motion_fixture(8), tiny_cfg)


def test_zero_up_means_no_down_or_cond_gradient(tiny_backbone, tiny_cfg):
    """With W_up at its zero init the first step's gradient reaches W_up only."""
    bb = tiny_backbone
    aset = make_motion_set(bb, tiny_cfg)
    ds = motion_fixture(4)
    video = ds.stacked()
    e = bb.image.encode_image(video[:, 0])
    with aset.attach(bb.unet):
        t = torch.tensor([300])
        out = bb.unet(video, t, bb.text.encode(ds.captions), appearance=e)
        out.square().mean().backward()
    for ad in aset.motion.values():
        assert torch.count_nonzero(ad.w_down.grad) == 0 and torch.count_nonzero(ad.w_cond.grad) == 0


def test_multi_video_mode_and_round_trip(tmp_path, tiny_cfg):
    a = train_motion(build_backbone(tiny_cfg, base=None), multi_motion_fixture(4), tiny_cfg)
    b = train_motion(build_backbone(tiny_cfg, base=None), multi_motion_fixture(4), tiny_cfg)
    assert a.mode == "multi_video"
    ta, tb = a.adapters.tensors()[0], b.adapters.tensors()[0]
    assert all(torch.equal(ta[k], tb[k]) for k in ta)
    saved = save_motion(tmp_path / "mot", a, tiny_cfg)
    loaded, h = load_motion(tmp_path / "mot", build_backbone(tiny_cfg, base=None))
    assert h == saved.content_hash and loaded.captions == a.captions
    tl = loaded.adapters.tensors()[0]
    assert all(torch.equal(tl[k], ta[k]) for k in ta)
    with pytest.raises(ValueError, match="cond_dim"):
        load_motion(tmp_path / "mot", build_backbone(tiny_config(cond_dim=16), base=None))


def test_lora_motion_variant(tiny_backbone):
    cfg = tiny_config(motion_adapter="lora", lora_rank=4)
    model = train_motion(tiny_backbone, motion_fixture(4), cfg)
    targets = model.adapters.plan.lora_targets
    assert any(".temporal." in p for p in targets) and any(".attn2." in p for p in targets)


def test_empty_caption_rejected():
    with pytest.raises(ValueError):
        MotionDataset([torch.zeros(4, 8, 8, 4)], [""])
