import math

import pytest
import torch

from vidcustom.adapters import (
    AdapterSet, IdentityAdapter, LoRALayer, MotionAdapter, PlacementPlan, attach, default_hidden, default_plan,
    identity_forward, lora_forward, lora_targets, make_identity_adapters, make_lora, make_motion_adapters,
    motion_forward,
)
from vidcustom.unet import UNetConfig, build_unet, enumerate_layers


def gelu_exact(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


@pytest.fixture(scope="module")
def small():
    cfg = UNetConfig(base_channels=16, channel_multipliers=(1,), num_blocks=1, attn_heads=2, text_dim=16,
                     frames=3, latent_hw=(4, 4), norm_groups=4)
    model = build_unet(cfg, seed=1)
    g = torch.Generator().manual_seed(0)
    z = torch.randn(2, 3, 4, 4, 4, generator=g)
    ctx = torch.randn(2, 5, 16, generator=g)
    t = torch.tensor([10, 500])
    e = torch.randn(2, 1, 8, generator=g)
    return model, z, t, ctx, e


def test_identity_forward_hand_value():
    h = torch.tensor([1.0, -1.0], dtype=torch.float64)
    out = identity_forward(h, torch.tensor([[1.0], [0.0]], dtype=torch.float64),
                           torch.tensor([[2.0, 0.0]], dtype=torch.float64))
    expected = [1 + 2 * gelu_exact(1.0), -1.0]
    assert out.tolist() == pytest.approx(expected, abs=1e-12)
    assert out.tolist() == pytest.approx([2.683, -1.0], abs=1e-3)


def test_identity_forward_zero_input_and_zero_up():
    w_down = torch.randn(4, 2)
    assert torch.equal(identity_forward(torch.zeros(3, 4), w_down, torch.randn(2, 4)), torch.zeros(3, 4))
    h = torch.randn(3, 4)
    assert torch.equal(identity_forward(h, w_down, torch.zeros(2, 4)), h)


def test_motion_forward_hand_value():
    d = torch.float64
    h = torch.tensor([[[0.0, 0.0], [1.0, 0.0]]], dtype=d)
    out = motion_forward(h, torch.tensor([[1.0]], dtype=d), torch.tensor([[1.0], [0.0]], dtype=d),
                         torch.tensor([[1.0, 0.0]], dtype=d), torch.tensor([[1.0, 0.0]], dtype=d))
    expected = [[gelu_exact(1.0), 0.0], [1 + gelu_exact(2.0), 0.0]]
    assert out[0].tolist() == [pytest.approx(r, abs=1e-12) for r in expected]
    assert out[0].flatten().tolist() == pytest.approx([0.841, 0.0, 2.954, 0.0], abs=1e-3)


def test_motion_forward_zero_e_matches_identity():
    g = torch.Generator().manual_seed(3)
    h = torch.randn(5, 4, 6, generator=g)
    w_down, w_up, w_cond = torch.randn(6, 3, generator=g), torch.randn(3, 6, generator=g), torch.randn(2, 6, generator=g)
    a = motion_forward(h, torch.zeros(5, 2), w_down, w_up, w_cond)
    b = identity_forward(h, w_down, w_up)
    assert (a - b).abs().max() <= 1e-7


def test_forward_dimension_errors():
    with pytest.raises(ValueError):
        identity_forward(torch.zeros(3), torch.zeros(2, 1), torch.zeros(1, 2))
    with pytest.raises(ValueError):
        motion_forward(torch.zeros(1, 2, 2), torch.zeros(1, 3), torch.zeros(2, 1), torch.zeros(1, 2), torch.zeros(1, 2))
    with pytest.raises(ValueError):
        lora_forward(torch.zeros(2, 3), torch.zeros(4, 4), torch.zeros(4, 1), torch.zeros(1, 4))


def test_lora_forward_oracles():
    g = torch.Generator().manual_seed(0)
    d = torch.float64
    x, w = torch.randn(5, 6, generator=g, dtype=d), torch.randn(6, 6, generator=g, dtype=d)
    assert torch.equal(lora_forward(x, w, torch.randn(6, 2, generator=g, dtype=d), torch.zeros(2, 6, dtype=d)), x @ w)
    eye = torch.eye(6, dtype=d)
    assert torch.allclose(lora_forward(x, w, eye, eye), x @ (w + eye))
    a, b = torch.randn(6, 3, generator=g, dtype=d), torch.randn(3, 6, generator=g, dtype=d)
    dense = x @ w + x @ (a @ b)
    assert (lora_forward(x, w, a, b) - dense).abs().max() <= 1e-6


def test_construction_invariants():
    ad = IdentityAdapter(9)
    assert ad.hidden == default_hidden(9) == 5
    assert torch.count_nonzero(ad.w_up) == 0
    with pytest.raises(ValueError):
        IdentityAdapter(4, hidden=4)
    m = MotionAdapter(8, 3)
    assert m.w_cond.shape == (3, 8) and torch.count_nonzero(m.w_up) == 0
    lo = LoRALayer(8, 6, rank=4)
    assert torch.count_nonzero(lo.b) == 0
    with pytest.raises(ValueError):
        LoRALayer(8, 6, rank=7)


def test_default_plan_targets(small):
    model = small[0]
    plan = default_plan(model)
    layers = {a.path: a for a in enumerate_layers(model)}
    assert plan.identity_targets and all(layers[p].category == "cross_attention" for p in plan.identity_targets)
    assert plan.motion_targets and all(layers[p].domain == "temporal" for p in plan.motion_targets)
    with pytest.raises(ValueError):
        PlacementPlan(identity_targets=plan.motion_targets[:1]).validate(model)
    with pytest.raises(ValueError):
        PlacementPlan(motion_targets=plan.identity_targets[:1]).validate(model)


def test_lora_target_families(small):
    model = small[0]
    subj = lora_targets(model, "subject")
    mot = lora_targets(model, "motion")
    assert all(".attn2." in p for p in subj)
    assert set(subj) < set(mot)
    assert {p.rsplit(".", 1)[1] for p in mot} == {"to_k", "to_v"}


def _fresh_set(model, cond_dim=8, seed=0):
    plan = default_plan(model)
    return AdapterSet(plan, make_identity_adapters(model, plan, seed=seed),
                      make_motion_adapters(model, plan, cond_dim, seed=seed),
                      make_lora(model, lora_targets(model, "motion"), rank=4, seed=seed))


def test_zero_init_transparent(small):
    model, z, t, ctx, e = small
    base = model(z, t, ctx, appearance=e)
    with _fresh_set(model).attach(model):
        out = model(z, t, ctx, appearance=e)
    assert (out - base).abs().max() <= 1e-6


def test_detach_leaves_no_residue(small):
    model, z, t, ctx, e = small
    base = model(z, t, ctx, appearance=e)
    aset = _fresh_set(model)
    for p in aset.parameters():
        torch.nn.init.normal_(p, std=0.1)
    aset.attach(model)
    changed = model(z, t, ctx, appearance=e)
    aset.detach()
    assert not torch.equal(changed, base)
    assert torch.equal(model(z, t, ctx, appearance=e), base)


def test_serial_and_parallel_differ(small):
    model, z, t, ctx, e = small
    outs = {}
    for mode in ("parallel", "serial"):
        plan = default_plan(model, self_attn_mode=mode, ff_mode=mode, cross_mode=mode)
        ident = make_identity_adapters(model, plan, seed=5)
        for ad in ident.values():
            torch.nn.init.normal_(ad.w_up, std=0.2)
        with attach(model, plan, identity=ident):
            outs[mode] = model(z, t, ctx)
    assert not torch.allclose(outs["parallel"], outs["serial"])


def test_parameter_count(small):
    model = small[0]
    aset = _fresh_set(model)
    expected = 0
    for ad in aset.identity.values():
        expected += 2 * ad.dim * ad.hidden
    for ad in aset.motion.values():
        expected += 2 * ad.dim * ad.hidden + ad.cond_dim * ad.dim
    for lo in aset.lora.values():
        expected += lo.a.numel() + lo.b.numel()
    assert aset.num_parameters() == expected


def test_width_mismatch_rejected(small):
    model = small[0]
    plan = default_plan(model)
    bad = torch.nn.ModuleDict({plan.identity_targets[0].replace(".", "/"): IdentityAdapter(40)})
    with pytest.raises(ValueError, match="width"):
        attach(model, PlacementPlan(identity_targets=plan.identity_targets[:1]), identity=bad)
    assert not any(m._forward_hooks for m in model.modules())


def test_unknown_address_rejected(small):
    with pytest.raises(ValueError):
        PlacementPlan(identity_targets=("down.9.9.spatial.attn2",)).validate(small[0])


def test_strict_mode_requires_appearance(small):
    model, z, t, ctx, _ = small
    plan = default_plan(model)
    aset = AdapterSet(plan, motion=make_motion_adapters(model, plan, 8), strict=True).attach(model)
    try:
        with pytest.raises(ValueError, match="appearance"):
            model(z, t, ctx)
    finally:
        aset.detach()


def test_zero_up_blocks_down_and_cond_gradients(small):
    model, z, t, ctx, e = small
    plan = default_plan(model)
    aset = AdapterSet(plan, motion=make_motion_adapters(model, plan, 8, seed=2))
    with aset.attach(model):
        model(z, t, ctx, appearance=e).square().mean().backward()
    for ad in aset.motion.values():
        assert torch.count_nonzero(ad.w_down.grad) == 0
        assert torch.count_nonzero(ad.w_cond.grad) == 0
        assert torch.count_nonzero(ad.w_up.grad) > 0
    opt = torch.optim.AdamW(aset.parameters(), lr=1e-2, weight_decay=0.0)
    opt.step()
    opt.zero_grad()
    with aset.attach(model):
        model(z, t, ctx, appearance=e).square().mean().backward()
    assert all(torch.count_nonzero(ad.w_cond.grad) > 0 for ad in aset.motion.values())


def test_tensors_round_trip(small):
    model, z, t, ctx, e = small
    aset = _fresh_set(model)
    for p in aset.parameters():
        torch.nn.init.normal_(p, std=0.05)
    tensors, roles = aset.tensors()
    assert set(roles.values()) == {"identity_adapter", "motion_adapter", "lora"}
    clone = AdapterSet.from_tensors(aset.plan, tensors)
    with aset.attach(model):
        a = model(z, t, ctx, appearance=e)
    with clone.attach(model):
        b = model(z, t, ctx, appearance=e)
    assert torch.equal(a, b)
