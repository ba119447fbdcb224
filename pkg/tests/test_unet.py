import pytest
import torch

from vidcustom.unet import (
    CATEGORIES, LayerAddress, UNetConfig, build_unet, domain_parameters, enumerate_layers, get_submodule,
    reshape_spatial, reshape_temporal, unshape_spatial, unshape_temporal,
)


@pytest.fixture(scope="module")
def model():
    cfg = UNetConfig(base_channels=16, channel_multipliers=(1, 2), num_blocks=1, attn_heads=2, text_dim=16,
                     frames=4, latent_hw=(4, 4), norm_groups=4)
    return build_unet(cfg, seed=0)


def _inputs(b=2, f=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, f, 4, 4, 4, generator=g), torch.tensor([3, 700])[:b], torch.randn(b, 6, 16, generator=g)


def test_reshapes_round_trip():
    x = torch.randn(2, 3, 4, 5, 6)
    assert reshape_spatial(x).shape == (6, 20, 6)
    assert reshape_temporal(x).shape == (40, 3, 6)
    assert torch.equal(unshape_spatial(reshape_spatial(x), 2, 3, 4, 5), x)
    assert torch.equal(unshape_temporal(reshape_temporal(x), 2, 3, 4, 5), x)


def test_forward_shape_and_frozen(model):
    z, t, ctx = _inputs()
    out = model(z, t, ctx)
    assert out.shape == z.shape
    assert not any(p.requires_grad for p in model.parameters())
    with pytest.raises(ValueError):
        model(z[..., :3], t, ctx)


def test_seeded_construction_is_reproducible():
    cfg = UNetConfig(base_channels=8, channel_multipliers=(1,), attn_heads=2, text_dim=8, frames=2,
                     latent_hw=(4, 4), norm_groups=4)
    a, b, c = build_unet(cfg, 5), build_unet(cfg, 5), build_unet(cfg, 6)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)


def test_frames_only_mix_through_temporal_layers(model):
    """Perturbing one frame changes other frames; zeroing temporal layers stops that."""
    z, t, ctx = _inputs(b=1)
    z2 = z.clone()
    z2[:, 0] += 1.0
    delta = (model(z2, t, ctx) - model(z, t, ctx)).abs()
    assert delta[:, 1:].max() > 0
    iso = build_unet(model.cfg, seed=0)
    state = iso.state_dict()
    for name in domain_parameters(iso, "temporal"):
        if ".temporal.proj_out." in name or ".temporal.conv." in name:
            state[name].zero_()
    iso.load_state_dict(state)
    d_iso = (iso(z2, t, ctx) - iso(z, t, ctx)).abs()
    assert d_iso[:, 1:].max() <= 1e-6


def test_layer_addresses(model):
    layers = enumerate_layers(model)
    cats = {a.category for a in layers}
    assert cats == set(CATEGORIES)
    assert all(a.domain == "spatial" for a in layers if a.category == "cross_attention")
    params = [p for a in layers for p in a.params]
    assert len(params) == len(set(params))
    assert set(params) == {n for n, _ in model.named_parameters()}
    for a in layers:
        if a.category in ("self_attention", "cross_attention", "feed_forward"):
            assert all(model.get_parameter(p).ndim >= 2 for p in a.params)
    assert any(a.domain == "temporal" and a.category == "self_attention" for a in layers)
    assert any(a.domain == "temporal" and a.category == "feed_forward" for a in layers)
    assert not any(a.domain == "temporal" and a.category == "cross_attention" for a in layers)


def test_address_validation(model):
    with pytest.raises(ValueError):
        LayerAddress("x", "cross_attention", "temporal")
    with pytest.raises(ValueError):
        LayerAddress("x", "conv", "spatial")
    with pytest.raises(KeyError):
        get_submodule(model, "down.7")


def test_domain_partition(model):
    sp, tp = set(domain_parameters(model, "spatial")), set(domain_parameters(model, "temporal"))
    assert sp and tp and not sp & tp
    assert sp | tp == {n for n, _ in model.named_parameters()}
