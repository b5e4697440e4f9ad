import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nicbench import codecs as C
from nicbench import gradcore as gc
from nicbench.gradcore import Tensor
from nicbench.images import to_tensor


def logistic_mass(v, loc, s):
    """P(v - 1/2 < Y < v + 1/2) for a logistic variable, written out with math.exp."""
    cdf = lambda t: 1.0 / (1.0 + math.exp(-(t - loc) / s))  # noqa: E731
    return cdf(v + 0.5) - cdf(v - 0.5)


@pytest.mark.parametrize("v,loc,s", [(0, 0, 1), (2, 0, 1), (-3, 0.5, 0.7), (1, 1, 2.5), (12, 0, 0.3)])
def test_logistic_likelihood_hand_cases(v, loc, s):
    p, _ = C.logistic_likelihood(Tensor([float(v)]), Tensor([loc]), Tensor([s]))
    assert p.data[0] == pytest.approx(max(logistic_mass(v, loc, s), C.LIKELIHOOD_FLOOR), rel=1e-12)


def test_likelihood_floor_counted():
    p, n = C.logistic_likelihood(Tensor([200.0, 0.0]), Tensor([0.0]), Tensor([1.0]))
    assert n == 1 and p.data[0] == C.LIKELIHOOD_FLOOR


def test_bpp_matches_likelihoods(toy_codec, small_image):
    code = toy_codec.encode(to_tensor(small_image), "hard")
    expect = -np.sum(np.log2(code.likelihoods.data)) / (16 * 16)
    assert C.bpp(code).item() == pytest.approx(expect, rel=1e-12)


def test_shapes_and_integer_latents(toy_codec, toy_hyper, small_image):
    x = to_tensor(small_image)
    for codec in (toy_codec, toy_hyper):
        code = codec.encode(x, "hard")
        assert code.y_hat.shape == (1, 8, 4, 4)
        assert np.array_equal(code.y_hat.data, np.round(code.y_hat.data))
        xhat, rate = codec.forward(x, "hard")
        assert xhat.shape == x.shape and rate.item() > 0
        assert 0 <= xhat.data.min() and xhat.data.max() <= 1


@pytest.mark.parametrize("h,w", [(13, 16), (16, 21), (9, 9)])
def test_non_multiple_sizes_padded_and_cropped(toy_hyper, h, w):
    x = np.random.default_rng(h * w).random((h, w, 3))
    out, rate = toy_hyper.compress(x)
    assert out.shape == (h, w, 3) and math.isfinite(rate)


def test_modes_agree_in_value(toy_codec, small_image):
    x = to_tensor(small_image)
    hard = toy_codec.forward(x, "hard")
    ste = toy_codec.forward(x, "ste")
    assert np.array_equal(hard[0].data, ste[0].data) and hard[1].item() == ste[1].item()
    soft = toy_codec.encode(x, "soft")
    assert not np.array_equal(soft.y_hat.data, np.round(soft.y_hat.data))


def test_noise_mode_needs_rng(toy_codec, small_image):
    with pytest.raises(C.CodecError):
        toy_codec.forward(to_tensor(small_image), "noise")
    with pytest.raises(C.CodecError):
        toy_codec.forward(to_tensor(small_image), "fuzzy")


def test_deterministic(toy_codec, small_image):
    a = toy_codec.compress(small_image)
    b = toy_codec.compress(small_image)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_ste_gradient_reaches_input(toy_codec, small_image):
    x = to_tensor(small_image, requires_grad=True)
    xhat, rate = toy_codec.forward(x, "ste")
    g = gc.backward(gc.add(gc.mse(xhat, x), rate))[x]
    assert np.all(np.isfinite(g)) and np.abs(g).sum() > 0
    x2 = to_tensor(small_image, requires_grad=True)
    xhat2, rate2 = toy_codec.forward(x2, "hard")
    assert gc.graph_has_nondiff(gc.add(gc.mse(xhat2, x2), rate2))


@pytest.mark.parametrize("family", C.FAMILIES)
def test_frozen_loss_gradient(family, toy_codec, toy_hyper, small_image):
    codec = toy_codec if family == "factorized" else toy_hyper
    x = to_tensor(small_image)
    f = C.frozen_rd_loss(codec, x)
    xhat, rate = codec.forward(x, "hard")
    assert f(x).item() == pytest.approx(codec.spec.lmbda * rate.item() + np.mean((xhat.data - x.data) ** 2),
                                        rel=1e-12)
    rep = gc.finite_diff_check(f, x, step=1e-6, tol=1e-3, directions=5)
    assert rep.passed, rep


def test_save_load_roundtrip(toy_hyper, small_image, tmp_path):
    p = tmp_path / "h.nrbc"
    C.save_params(toy_hyper, p)
    back = C.load_params(p)
    assert back.spec == toy_hyper.spec and back.param_count == toy_hyper.param_count
    for k, v in toy_hyper.params.items():
        assert np.array_equal(back.params[k], v)
    assert np.array_equal(back.compress(small_image)[0], toy_hyper.compress(small_image)[0])
    assert C.read_header(p)["param_count"] == toy_hyper.param_count


def test_truncated_and_corrupt_files(toy_codec, tmp_path):
    p = tmp_path / "m.nrbc"
    C.save_params(toy_codec, p)
    blob = p.read_bytes()
    (tmp_path / "cut.nrbc").write_bytes(blob[:-10])
    with pytest.raises(C.CodecFormatError, match="truncated"):
        C.load_params(tmp_path / "cut.nrbc")
    (tmp_path / "bad.nrbc").write_bytes(b"JUNK" + blob[4:])
    with pytest.raises(C.CodecFormatError, match="magic"):
        C.load_params(tmp_path / "bad.nrbc")


def test_params_read_only(toy_codec):
    with pytest.raises(ValueError):
        toy_codec.params["enc0.w"][0, 0, 0, 0] = 1.0


def test_training_reduces_loss(toy_codec):
    meta = toy_codec.metadata
    assert meta["final_loss"] < meta["initial_loss"]


def test_training_is_seeded(train_set):
    spec = C.CodecSpec("factorized", lmbda=0.01, seed=9)
    a = C.train(spec, train_set[:8], epochs=1, seed=9)
    b = C.train(spec, train_set[:8], epochs=1, seed=9)
    assert a.loss_curve == b.loss_curve


def test_bad_specs():
    with pytest.raises(C.CodecError):
        C.CodecSpec("jpeg")
    with pytest.raises(C.CodecError):
        C.CodecSpec(downsample_factor=3)
    with pytest.raises(C.CodecError):
        C.CodecSpec(lmbda=-1)
    with pytest.raises(C.TrainingError):
        C.train(C.CodecSpec(), [], epochs=1)


def test_identity_codec(small_image):
    out, rate = C.IdentityCodec().compress(small_image)
    assert np.array_equal(out, small_image) and rate == 24.0


@given(st.integers(0, 2 ** 16))
@settings(max_examples=15, deadline=None)
def test_output_range_property(toy_codec, seed):
    x = np.random.default_rng(seed).random((8, 12, 3))
    out, rate = toy_codec.compress(x)
    assert out.min() >= 0 and out.max() <= 1 and rate >= 0


def test_rate_free_training_reduces_distortion(train_set):
    spec = C.CodecSpec("factorized", lmbda=0.0, seed=2)
    res = C.train(spec, train_set, epochs=4, seed=2)
    x = to_tensor(train_set[0])
    before = C.CodecVariant(spec, C.init_params(spec))
    mse = lambda v: float(np.mean((v.forward(x, "hard")[0].data - x.data) ** 2))  # noqa: E731
    assert mse(res.variant) < mse(before)
    assert res.final_loss < res.initial_loss
