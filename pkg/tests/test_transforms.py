import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cvsynth.autodiff import gradcheck
from cvsynth.transforms import depth_to_space, haar_pyramid, space_to_depth


def test_s2d_full_scale_shape():
    x = torch.randn(1, 3, 8, 8)
    assert space_to_depth(x, 8).shape == (1, 192, 1, 1)


def test_s2d_block_one_identity():
    x = torch.randn(2, 3, 4, 4)
    assert torch.equal(space_to_depth(x, 1), x)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 999))
def test_s2d_roundtrip(block, c, hb, wb, seed):
    x = torch.randn(2, c, hb * block, wb * block, generator=torch.Generator().manual_seed(seed))
    y = space_to_depth(x, block)
    assert torch.equal(depth_to_space(y, block), x)
    assert torch.equal(torch.sort(y.flatten()).values, torch.sort(x.flatten()).values)


def test_d2s_shape():
    assert depth_to_space(torch.randn(1, 64, 1, 1), 8).shape == (1, 1, 8, 8)


def test_d2s_hand_enumeration():
    # channel k = block_row * 2 + block_col for a single input channel
    x = torch.tensor([10.0, 11.0, 12.0, 13.0]).reshape(1, 4, 1, 1)
    y = depth_to_space(x, 2)
    assert y[0, 0].tolist() == [[10.0, 11.0], [12.0, 13.0]]


def test_s2d_channel_order_multichannel():
    # out channel c*b*b + i*b + j holds input channel c at offset (i, j)
    x = torch.arange(2 * 2 * 2, dtype=torch.float32).reshape(1, 2, 2, 2)
    y = space_to_depth(x, 2).reshape(-1).tolist()
    assert y == [0, 1, 2, 3, 4, 5, 6, 7]


def test_errors():
    with pytest.raises(ValueError):
        space_to_depth(torch.zeros(1, 1, 6, 8), 4)
    with pytest.raises(ValueError):
        depth_to_space(torch.zeros(1, 6, 2, 2), 2)


def test_haar_constant_zero_details():
    pyr = haar_pyramid(np.full((13, 10), 0.7))
    assert len(pyr.scales) == 3
    for band in pyr.details():
        assert float(band.abs().max()) < 1e-12


def test_haar_single_block():
    img = np.zeros((8, 8))
    img[0, 0] = 1.0
    lh, hl, hh = haar_pyramid(img).scales[0]
    # a=1, b=c=d=0 in the four analysis formulas
    from cvsynth.transforms import haar_step
    ll = haar_step(torch.as_tensor(img))[0]
    assert float(ll[0, 0]) == 0.5
    assert float(lh[0, 0]) == 0.5 and float(hl[0, 0]) == 0.5 and float(hh[0, 0]) == 0.5


def test_haar_direct_block_formulas():
    rng = np.random.default_rng(0)
    img = rng.random((8, 8))
    lh, hl, hh = haar_pyramid(img).scales[0]
    for i in range(4):
        for j in range(4):
            a, b = img[2 * i, 2 * j], img[2 * i, 2 * j + 1]
            c, d = img[2 * i + 1, 2 * j], img[2 * i + 1, 2 * j + 1]
            assert abs(float(lh[i, j]) - (a - b + c - d) / 2) < 1e-12
            assert abs(float(hl[i, j]) - (a + b - c - d) / 2) < 1e-12
            assert abs(float(hh[i, j]) - (a - b - c + d) / 2) < 1e-12


def test_haar_scale_shapes_odd():
    pyr = haar_pyramid(np.random.default_rng(1).random((13, 7)))
    shapes = [tuple(s[0].shape) for s in pyr.scales]
    assert shapes == [(7, 4), (4, 2), (2, 1)]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 999))
def test_haar_energy_scale1(hh, ww, seed):
    img = np.random.default_rng(seed).normal(size=(2 * hh, 2 * ww))
    from cvsynth.transforms import haar_step
    bands = haar_step(torch.as_tensor(img))
    energy = sum(float((b ** 2).sum()) for b in bands)
    assert abs(energy - float((img ** 2).sum())) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 999))
def test_haar_linear(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((9, 12)), rng.random((9, 12))
    pz = haar_pyramid(alpha * x + beta * y)
    px, py = haar_pyramid(x), haar_pyramid(y)
    for bz, bx, by in zip(pz.details(), px.details(), py.details()):
        assert float((bz - (alpha * bx + beta * by)).abs().max()) < 1e-9


def test_haar_too_small():
    with pytest.raises(ValueError):
        haar_pyramid(np.zeros((1, 8)))


def test_transforms_gradcheck():
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)
    w = torch.randn(1, 8, 2, 2, generator=g, dtype=torch.float64)
    assert gradcheck(lambda x: (space_to_depth(x, 2) * w).sum(), x0) < 1e-4
    wd = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)
    assert gradcheck(lambda x: (depth_to_space(x.reshape(1, 8, 2, 2), 2) * wd[:, :2]).sum(), x0) < 1e-4
    img = torch.randn(9, 10, generator=g, dtype=torch.float64)

    def f(x):
        return sum((b * b).sum() for b in haar_pyramid(x).details())

    assert gradcheck(f, img) < 1e-4
