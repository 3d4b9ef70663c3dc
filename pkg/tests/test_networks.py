import numpy as np
import pytest
import torch

from cvsynth import gradsuite
from cvsynth.memory import MemoryBank
from cvsynth.metrics import baseline_interpolate
from cvsynth.networks import (
    FULL_SCALE_NET, ChannelAttention, NetConfig, ResidualBlock, build_pint, build_sint, linear_upsample_last,
    pint_image, pint_images, pint_volume, randomize_, sint_forward, sint_volume,
)
from cvsynth.volume import Volume, ViewImage, upsampled_length


def tiny(r=2, **kw):
    return NetConfig(base_channels=8, blocks_per_group=1, s2d_block=2, r=r, memory_size=3, **kw)


def vol(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed))


@pytest.fixture(scope="module", params=[2, 3, 4])
def nets(request):
    cfg = tiny(request.param)
    sint = randomize_(build_sint(cfg, 0), seed=1, std=0.05)
    pint = randomize_(build_pint(cfg, 1), seed=2, std=0.05)
    return cfg, sint, pint, MemoryBank(3, 8, seed=3)


@pytest.mark.parametrize("l", range(2, 17))
def test_output_lengths(nets, l):
    cfg, sint, pint, bank = nets
    v = vol(1, 8, 4, l)
    expected = cfg.r * l - cfg.r + 1
    with torch.no_grad():
        assert sint_volume(sint, bank, v).shape == (1, 8, 4, expected)
        assert pint_volume(pint, v, "coronal").shape == (1, 8, 4, expected)
        assert pint_volume(pint, v, "sagittal").shape == (1, 8, 4, expected)
    assert upsampled_length(l, cfg.r) == expected


def test_sint_keeps_original_slices(nets):
    cfg, sint, _, bank = nets
    v = vol(2, 8, 8, 5, seed=4)
    with torch.no_grad():
        out = sint_volume(sint, bank, v)
    assert torch.equal(out[..., :: cfg.r], v)
    assert not torch.allclose(out[..., 1], 0.5 * (v[..., 0] + v[..., 1]))  # randomized net is not linear


def test_pint_column_drop(nets):
    cfg, _, pint, _ = nets
    r = cfg.r
    x = vol(3, 8, 6, seed=5)
    with torch.no_grad():
        out = pint_images(pint, x)
        f = pint.head(x[:, None])
        body = f
        for blocks, conv in zip(pint.groups, pint.group_convs):
            body = body + conv(blocks(body))
        body = pint.body_out(body) + f
        full = linear_upsample_last(x, r) + pint.upsample(body).permute(0, 2, 3, 1).reshape(3, 8, 6 * r)
    assert full.shape[-1] == r * 6
    assert torch.allclose(out, full[..., : r * 6 - r + 1], atol=1e-6)


@pytest.mark.parametrize("r", [2, 3, 4])
def test_untrained_models_are_linear_interpolation(r):
    cfg = tiny(r)
    v = np.random.default_rng(r).random((8, 8, 5)).astype(np.float32)
    ref = baseline_interpolate(Volume(v), r).data
    t = torch.from_numpy(v)[None]
    with torch.no_grad():
        a = sint_volume(build_sint(cfg), MemoryBank(3, 8), t)[0].numpy()
        c = pint_volume(build_pint(cfg), t, "coronal")[0].numpy()
    assert np.allclose(a, ref, atol=1e-6)
    assert np.allclose(c, ref, atol=1e-6)


def test_views_share_parameters():
    cfg = tiny()
    pint = randomize_(build_pint(cfg), seed=6, std=0.05)
    v = vol(1, 8, 6, 5, seed=7)
    with torch.no_grad():
        sag = pint_volume(pint, v, "sagittal")
        cor_t = pint_volume(pint, v.transpose(1, 2), "coronal").transpose(1, 2)
    assert torch.allclose(sag, cor_t, atol=1e-6)


def test_shared_parameters_collect_both_views_gradient():
    cfg = tiny()
    pint = randomize_(build_pint(cfg), seed=8, std=0.05)
    v = vol(1, 8, 8, 4, seed=9)
    grads = []
    for view in ("coronal", "sagittal"):
        pint.zero_grad()
        pint_volume(pint, v, view).sum().backward()
        grads.append(pint.head.weight.grad.clone())
    pint.zero_grad()
    (pint_volume(pint, v, "coronal").sum() + pint_volume(pint, v, "sagittal").sum()).backward()
    assert torch.allclose(pint.head.weight.grad, grads[0] + grads[1], atol=1e-5)


def test_full_scale_feature_shape():
    cfg = NetConfig(**FULL_SCALE_NET)
    net = build_sint(cfg)
    with torch.no_grad():
        f = net.features(torch.zeros(1, 1, 64, 64))
    assert f.shape == (1, 192, 8, 8)


def test_seeded_build_is_deterministic():
    a, b, c = build_sint(tiny(), 5), build_sint(tiny(), 5), build_sint(tiny(), 6)
    for (k, pa), (_, pb), (_, pc) in zip(a.state_dict().items(), b.state_dict().items(), c.state_dict().items()):
        assert torch.equal(pa, pb), k
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.state_dict().values(), c.state_dict().values()))


def test_residual_block_identity_at_init():
    block = ResidualBlock(8, 4, torch.Generator().manual_seed(0))
    x = vol(2, 8, 5, 5)
    with torch.no_grad():
        assert torch.equal(block(x), x)


def test_channel_attention_gates_in_unit_interval():
    ca = randomize_(ChannelAttention(8, 4), std=1.0)
    u = vol(2, 8, 4, 4) + 0.5
    with torch.no_grad():
        ratio = ca(u) / u
    assert torch.all(ratio > 0) and torch.all(ratio < 1)
    # the gate is one scalar per channel
    assert torch.allclose(ratio, ratio[..., :1, :1].expand_as(ratio), atol=1e-6)


def test_sint_without_memory():
    cfg = tiny(use_memory=False)
    net = randomize_(build_sint(cfg), std=0.05)
    out = sint_forward(net, MemoryBank(3, 8), vol(1, 8, 8), vol(1, 8, 8, seed=1))
    assert out.read is None and out.slices.shape == (1, 1, 8, 8)


def test_sint_rejects_bad_sizes():
    net = build_sint(tiny())
    with pytest.raises(ValueError):
        sint_forward(net, None, vol(1, 7, 8), vol(1, 7, 8))
    with pytest.raises(ValueError):
        sint_forward(net, None, vol(1, 8, 8), vol(1, 8, 4))
    with pytest.raises(ValueError):
        sint_volume(net, None, vol(1, 8, 8, 1))


def test_pint_image_contract():
    pint = build_pint(tiny(3))
    img = ViewImage(np.random.default_rng(0).random((8, 4)).astype(np.float32), "coronal", 2)
    out = pint_image(pint, img)
    assert out.data.shape == (8, 10) and out.view == "coronal" and out.index == 2
    with pytest.raises(ValueError):
        pint_image(pint, ViewImage(img.data, "axial", 1))
    with pytest.raises(ValueError):
        pint_image(pint, img, r=2)
    with pytest.raises(ValueError):
        pint_volume(pint, vol(1, 8, 8, 3), "axial")


def test_pint_z_pad_equals_padding_by_hand():
    padded, plain = tiny(pint_z_pad=2), tiny()
    net = randomize_(build_pint(padded, 1), seed=2, std=0.05)
    ref = build_pint(plain, 1)
    ref.load_state_dict(net.state_dict())
    x = vol(2, 8, 5, seed=4)
    xp = torch.nn.functional.pad(x[:, None], (2, 2, 0, 0), mode="replicate")[:, 0]
    with torch.no_grad():
        out = pint_images(net, x)
        by_hand = pint_images(ref, xp)
    assert out.shape == (2, 8, 9)
    assert torch.allclose(out, by_hand[..., 4:13], atol=1e-6)


def test_bias_free_pint_drops_conv_biases():
    convs = [m for m in build_pint(tiny(pint_bias=False), 0).modules() if type(m).__name__ == "Conv"]
    assert convs and all(m.bias is None for m in convs)
    assert all(m.bias is not None for m in build_pint(tiny(), 0).modules() if type(m).__name__ == "Conv")
    assert all(m.bias is not None for m in build_sint(tiny(pint_bias=False), 0).modules()
               if type(m).__name__ == "Conv")


@pytest.mark.parametrize("c", [0.0, 0.3, 0.9])
def test_centered_bias_free_pint_leaves_constants_alone(c):
    cfg = tiny(center_inputs=True, pint_bias=False, pint_z_pad=3)
    pint = randomize_(build_pint(cfg, 1), seed=2, std=0.2)
    with torch.no_grad():
        assert torch.allclose(pint_images(pint, torch.full((2, 8, 6), c)), torch.full((2, 8, 11), c), atol=1e-7)


def test_centering_makes_corrections_shift_invariant():
    cfg = tiny(center_inputs=True, pint_bias=False)
    sint = randomize_(build_sint(cfg, 0), seed=1, std=0.2)
    pint = randomize_(build_pint(cfg, 1), seed=2, std=0.2)
    bank = MemoryBank(3, 8, seed=3)
    x = vol(2, 8, 6, seed=6)
    a, b = vol(2, 8, 8, seed=7), vol(2, 8, 8, seed=8)
    with torch.no_grad():
        assert torch.allclose(pint_images(pint, x + 0.25), pint_images(pint, x) + 0.25, atol=1e-6)
        shifted = sint_forward(sint, bank, a + 0.25, b + 0.25).slices
        assert torch.allclose(shifted, sint_forward(sint, bank, a, b).slices + 0.25, atol=1e-5)


@pytest.mark.parametrize("bad", [dict(base_channels=10), dict(r=1), dict(base_channels=8, s2d_block=4),
                                 dict(pint_z_pad=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        NetConfig(**{**dict(base_channels=8, s2d_block=2), **bad})


def test_tiny_network_gradchecks():
    results = {r.name: r for r in gradsuite.run(full=True)}
    for name in ("sint_network", "pint_network"):
        assert results[name].error < 1e-3, name
    assert results["residual_block"].error < 1e-4
