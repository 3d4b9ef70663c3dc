import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from cvsynth.metrics import baseline_interpolate, evaluate, psnr, ssim_image, ssim_view
from cvsynth.volume import Volume


def rand_volume(shape=(12, 13, 14), seed=0, rng_=(0.0, 1.0)):
    return Volume(np.random.default_rng(seed).random(shape), intensity_range=rng_)


class TestPSNR:
    def test_mse_one_range_255(self):
        gt = Volume(np.zeros((2, 2, 2)), intensity_range=(0, 255))
        pred = Volume(np.ones((2, 2, 2)), intensity_range=(0, 255))
        assert abs(psnr(pred, gt) - 48.1308) < 1e-3

    def test_exact_match_infinite(self):
        v = rand_volume()
        assert psnr(v, v) == math.inf

    def test_full_range_error_zero_db(self):
        gt = Volume(np.zeros((2, 3, 4)))
        assert psnr(Volume(np.ones((2, 3, 4))), gt) == 0.0

    def test_strictly_decreasing_in_noise(self):
        gt = rand_volume()
        z = np.random.default_rng(1).normal(size=gt.shape)
        vals = [psnr(Volume(gt.data + s * z), gt) for s in (0.001, 0.01, 0.05, 0.2)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(rand_volume((2, 2, 2)), rand_volume((2, 2, 3)))


class TestSSIM:
    @pytest.mark.parametrize("view", ["axial", "coronal", "sagittal"])
    def test_self_is_one(self, view):
        v = rand_volume()
        assert ssim_view(v, v, view) == 1.0

    def test_constant_images(self):
        c1v, c2v = 0.3, 0.7
        x, y = np.full((16, 16), c1v), np.full((16, 16), c2v)
        C1 = (0.01 * 1.0) ** 2
        expected = (2 * c1v * c2v + C1) / (c1v ** 2 + c2v ** 2 + C1)
        assert abs(ssim_image(x, y, 1.0) - expected) < 1e-12

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 9999))
    def test_matches_reference_implementation(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.random((20, 24))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        ref = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        assert abs(ssim_image(x, y, 1.0) - ref) < 1e-10

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 9999), st.sampled_from(["axial", "coronal", "sagittal"]))
    def test_symmetric_and_bounded(self, seed, view):
        a, b = rand_volume(seed=seed), rand_volume(seed=seed + 1)
        s = ssim_view(a, b, view)
        assert s == pytest.approx(ssim_view(b, a, view), abs=1e-12)
        assert -1 <= s <= 1

    def test_small_image_fallback_flag(self):
        warnings = []
        a, b = rand_volume((12, 12, 5)), rand_volume((12, 12, 5), seed=3)
        ssim_view(a, b, "coronal", warnings)
        assert warnings == ["global_ssim_fallback"]


class TestBaseline:
    def test_linear_midpoint(self):
        v = Volume(np.stack([np.zeros((3, 3)), np.ones((3, 3))], axis=2))
        out = baseline_interpolate(v, 2, "linear")
        assert out.shape == (3, 3, 3)
        assert np.allclose(out.data[:, :, 1], 0.5)

    def test_nearest_tie_lower(self):
        v = Volume(np.stack([np.zeros((2, 2)), np.ones((2, 2))], axis=2))
        assert np.all(baseline_interpolate(v, 2, "nearest").data[:, :, 1] == 0)
        out3 = baseline_interpolate(v, 3, "nearest").data
        assert np.all(out3[:, :, 1] == 0) and np.all(out3[:, :, 2] == 1)

    def test_shape_r4_l3(self):
        assert baseline_interpolate(rand_volume((2, 2, 3)), 4).shape == (2, 2, 9)

    @pytest.mark.parametrize("method", ["linear", "nearest"])
    def test_keeps_originals(self, method):
        v = rand_volume((3, 3, 5))
        out = baseline_interpolate(v, 3, method)
        assert np.array_equal(out.data[:, :, ::3], v.data)

    def test_affine_profiles_exact(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((4, 4, 1)) * 0.1, rng.random((4, 4, 1)) * 0.1
        hr = Volume(a + b * np.arange(9)[None, None, :] / 8)
        lr = Volume(hr.data[:, :, ::2])
        assert np.allclose(baseline_interpolate(lr, 2).data, hr.data, atol=1e-6)

    def test_too_short(self):
        with pytest.raises(ValueError):
            baseline_interpolate(rand_volume((2, 2, 1)), 2)


def test_evaluate_report_json():
    v = rand_volume((12, 12, 13))
    rep = evaluate(v, v, lr=Volume(v.data[:, :, ::2]), r=2).to_dict()
    assert rep["psnr"] == "inf" and rep["ssim_a"] == 1.0
    assert set(rep["baselines"]) == {"nearest", "linear"}
