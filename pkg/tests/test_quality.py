import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nicbench import quality as q
from nicbench.images import synthetic_image
from oracles import oracle_ms_ssim


def test_psnr_identity_cap():
    x = np.random.default_rng(0).random((8, 8, 3))
    assert q.mse(x, x) == 0.0
    assert q.psnr(x, x) == 100.0


def test_psnr_half_gray():
    a, b = np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)
    assert q.mse(a, b) == 0.25
    assert abs(q.psnr(a, b) - 6.0206) < 1e-4


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_psnr_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    assert q.psnr(a, b) == q.psnr(b, a)


def test_extent_mismatch_raises():
    with pytest.raises(ValueError):
        q.mse(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        q.ms_ssim(np.zeros((32, 32, 3)), np.zeros((32, 33, 3)))


def test_ms_ssim_identity():
    x = synthetic_image("noise", 64, np.random.default_rng(1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", q.ScaleReductionWarning)
        assert q.ms_ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ms_ssim_inverted_pattern_low():
    x = synthetic_image("checkerboard", 128, np.random.default_rng(2))
    assert oracle_ms_ssim(x, 1 - x) < 0.5
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", q.ScaleReductionWarning)
        assert q.ms_ssim(x, 1 - x) < 0.5


def test_ms_ssim_matches_oracle_random_pairs():
    rng = np.random.default_rng(3)
    worst = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", q.ScaleReductionWarning)
        for _ in range(10):
            a = synthetic_image("noise", 128, rng)
            b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.2), a.shape), 0, 1)
            worst = max(worst, abs(q.ms_ssim(a, b) - oracle_ms_ssim(a, b)))
    assert worst <= 1e-6


def test_scale_reduction_warns_and_renormalises():
    x = synthetic_image("noise", 64, np.random.default_rng(4))
    y = np.clip(x + 0.05, 0, 1)
    with pytest.warns(q.ScaleReductionWarning):
        v = q.ms_ssim(x, y)
    assert v == pytest.approx(oracle_ms_ssim(x, y), abs=1e-9)
    assert q.usable_scales(64, 64, 5, 11) == 3
    assert q.usable_scales(128, 128, 5, 11) == 4


def test_ms_ssim_monotone_in_noise():
    rng = np.random.default_rng(5)
    x = synthetic_image("blend", 128, rng)
    vals = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", q.ScaleReductionWarning)
        for sigma in (0.01, 0.03, 0.06, 0.1, 0.2):
            noisy = np.clip(x + np.random.default_rng(6).normal(0, sigma, x.shape), 0, 1)
            vals.append(q.ms_ssim(x, noisy))
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ycbcr_conversion():
    white = np.ones((1, 1, 3))
    red = np.array([[[1.0, 0.0, 0.0]]])
    gray = np.full((1, 1, 3), 0.37)
    assert q.rgb_to_ycbcr(white)[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
    assert q.rgb_to_ycbcr(red)[0, 0, 0] == pytest.approx(0.299, abs=1e-12)
    ycc = q.rgb_to_ycbcr(gray)[0, 0]
    assert ycc[1] == pytest.approx(0.5, abs=1e-9) and ycc[2] == pytest.approx(0.5, abs=1e-9)


def test_delta_score_cases():
    rng = np.random.default_rng(7)
    x = rng.random((8, 8, 3))
    xa = np.clip(x + rng.normal(0, 0.05, x.shape), 0, 1)
    for fr in ("mse", "psnr", "ms_ssim"):
        if fr == "ms_ssim":
            x2 = rng.random((16, 16, 3))
            xa2 = np.clip(x2 + 0.03, 0, 1)
            assert q.delta_score(fr, x2, xa2, x2, xa2) == 0.0
        else:
            assert q.delta_score(fr, x, xa, x, xa) == 0.0
    cx = np.clip(x * 0.9, 0, 1)
    assert q.delta_score("psnr", x, x, cx, cx) == 0.0


def test_delta_score_hand_case_mse():
    # FR(x, x') = 0.01 and FR(C(x), C(x')) = 0.04 on 2x2 images
    x = np.zeros((2, 2, 3))
    xa = np.full((2, 2, 3), 0.1)
    cx = np.full((2, 2, 3), 0.5)
    cxa = np.full((2, 2, 3), 0.7)
    assert q.delta_score("mse", x, xa, cx, cxa) == pytest.approx(-0.03, abs=1e-15)


def test_small_delta_hand_case_psnr():
    # clean reconstruction MSE 1e-3 (30 dB), adversarial reconstruction MSE 10^-2.4 (24 dB)
    x = np.zeros((4, 4, 3))
    cx = np.full((4, 4, 3), np.sqrt(1e-3))
    xa = np.zeros((4, 4, 3))
    cxa = np.full((4, 4, 3), np.sqrt(10 ** -2.4))
    assert q.psnr(x, cx) == pytest.approx(30.0, abs=1e-9)
    assert q.small_delta_score("psnr", x, cx, xa, cxa) == pytest.approx(6.0, abs=1e-9)


def test_small_delta_no_attack_and_identity_codec():
    rng = np.random.default_rng(8)
    x = rng.random((8, 8, 3))
    cx = np.clip(x + 0.02, 0, 1)
    assert q.small_delta_score("psnr", x, cx, x, cx) == 0.0
    xa = np.clip(x + 0.03, 0, 1)
    assert q.small_delta_score("psnr", x, x, xa, xa) == 0.0


def test_delta_bpp():
    assert q.delta_bpp(0.4, 0.4) == 0.0
    assert q.delta_bpp(0.5, 0.75) == 0.25


def test_delta_sign_convention():
    # if FR(C(x), C(x')) < FR(x, x') then Delta > 0
    rng = np.random.default_rng(9)
    x = rng.random((8, 8, 3))
    xa = np.clip(x + 0.01, 0, 1)
    cx = x.copy()
    cxa = np.clip(x + 0.1, 0, 1)
    assert q.psnr(cx, cxa) < q.psnr(x, xa)
    assert q.delta_score("psnr", x, xa, cx, cxa) > 0


def test_ms_ssim_tensor_gradient_finite_differences():
    from nicbench import gradcore as gc
    rng = np.random.default_rng(10)
    a = synthetic_image("noise", 24, rng).transpose(2, 0, 1)[None]
    b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", q.ScaleReductionWarning)
        rep = gc.finite_diff_check(lambda t: gc.tsum(q.ms_ssim_tensor(t, b, scales=2)), a,
                                   step=1e-5, tol=1e-4, max_elems=60)
    assert rep.passed, str(rep)
