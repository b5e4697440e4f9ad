import zlib

import numpy as np
import pytest

from nicbench import gradcore as gc
from nicbench import kernels
from nicbench.gradcore import Tensor


def fd_grad(f, x, h=1e-6):
    """Plain central differences on ndarrays (independent of the engine's checker)."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_sum_square_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = gc.tsum(gc.square(x))
    grads = gc.backward(loss)
    assert loss.item() == 5.0
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])


def test_identity_kernel_conv():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3, 5, 6))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = gc.conv2d(Tensor(x), Tensor(w), stride=1)
    np.testing.assert_array_equal(out.data, x)


def test_round_ste():
    x = Tensor([0.4], requires_grad=True)
    y = gc.round_ste(x)
    assert y.data[0] == 0.0
    assert gc.backward(gc.tsum(y))[x][0] == 1.0


def test_mean_gradient():
    x = Tensor(np.arange(7.0), requires_grad=True)
    g = gc.backward(gc.mean(x))[x]
    np.testing.assert_allclose(g, np.full(7, 1 / 7), rtol=0, atol=1e-15)


def test_non_grad_leaf_absent():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    grads = gc.backward(gc.tsum(x * c))
    assert x in grads and c not in grads


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(gc.GradError):
        gc.backward(gc.square(x))


def test_shape_error_names_operator():
    with pytest.raises(gc.ShapeError, match="add"):
        gc.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(gc.ShapeError, match="conv2d"):
        gc.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_clamp01_gradient_mask():
    x = Tensor([-0.5, 0.0, 0.3, 1.0, 1.2], requires_grad=True)
    g = gc.backward(gc.tsum(gc.clamp01(x)))[x]
    np.testing.assert_array_equal(g, [0, 1, 1, 1, 0])


def _conv_net_loss(rng):
    w1 = rng.normal(size=(4, 3, 3, 3)) * 0.3
    b1 = rng.normal(size=4) * 0.1
    w2 = rng.normal(size=(4, 2, 4, 4)) * 0.3

    def f(x):
        h = gc.leaky_relu(gc.conv2d(x, w1, b1, stride=2, padding=1))
        h = gc.conv_transpose2d(h, w2, stride=2, padding=1)
        return gc.tsum(gc.square(h)) * 0.1

    return f


def test_conv_graph_matches_finite_differences():
    rng = np.random.default_rng(1)
    f = _conv_net_loss(rng)
    x = rng.normal(size=(1, 3, 6, 6))
    rep = gc.finite_diff_check(f, x, step=1e-3, tol=1e-4)
    assert rep.passed, str(rep)


def test_fd_check_quadratic_tight():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4))
    rep = gc.finite_diff_check(lambda t: gc.tsum(gc.square(t)), x, step=1e-3, tol=1e-6)
    assert rep.passed and rep.status == "pass"


def test_fd_check_flags_hard_round():
    x = np.array([0.4999, 1.2, 2.5001])
    rep = gc.finite_diff_check(lambda t: gc.tsum(gc.round_hard(t) * 3.0), x, step=1e-3, tol=1e-4)
    assert not rep.passed
    assert rep.status == "non-differentiable point"


def test_fd_check_rejects_nonfinite():
    with pytest.raises(gc.GradError):
        gc.finite_diff_check(lambda t: gc.tsum(gc.log(t)), np.array([-1.0, 1.0]))


def test_linearity_of_backward():
    rng = np.random.default_rng(3)
    f1 = _conv_net_loss(rng)
    f2 = lambda t: gc.tsum(gc.sigmoid(t) * 2.0)  # noqa: E731
    x = rng.normal(size=(1, 3, 6, 6))
    _, g1 = gc.grad(f1, x)
    _, g2 = gc.grad(f2, x)
    _, g12 = gc.grad(lambda t: f1(t) + f2(t), x)
    np.testing.assert_allclose(g12, g1 + g2, rtol=0, atol=1e-12)


def test_seeded_replay_bit_identical():
    def run(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(np.linspace(-1, 1, 24).reshape(1, 2, 3, 4), requires_grad=True)
        y = gc.add_uniform_noise(x, rng)
        return gc.tsum(gc.square(y)).data.copy()

    assert run(5).tobytes() == run(5).tobytes()


def test_gather_gradient_is_adjoint():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3))
    idx = rng.integers(0, 6, size=(5, 2))
    w = rng.normal(size=(5, 2))
    g = rng.normal(size=5)
    xt = Tensor(x, requires_grad=True)
    out = gc.gather(xt, idx, w)
    gx = gc.backward(gc.tsum(out * g))[xt]
    # <gather(x), g> == <x, gather^T(g)>
    assert np.isclose((out.data * g).sum(), (x * gx).sum())


# Every differentiable primitive against central differences, 100 random inputs each.
_W = np.random.default_rng(11).normal(size=(2, 2, 3, 3))
_WT = np.random.default_rng(12).normal(size=(2, 2, 4, 4))
_B = np.array([0.1, -0.2])
_IDX = np.random.default_rng(13).integers(0, 2 * 4 * 4, size=(7, 3))
_GW = np.random.default_rng(14).random(size=(7, 3))

PRIMITIVES = {
    "add": (lambda t: gc.add(t, t * 0.5 + 1.0), "any"),
    "sub": (lambda t: gc.sub(gc.square(t), t), "any"),
    "mul": (lambda t: gc.mul(t, gc.exp(t * 0.1)), "any"),
    "div": (lambda t: gc.div(t, gc.square(t) + 1.0), "any"),
    "scale": (lambda t: gc.scale(t, -2.5), "any"),
    "square": (gc.square, "any"),
    "sqrt": (gc.sqrt, "positive"),
    "power": (lambda t: gc.power(t, 0.7), "positive"),
    "abs": (gc.tabs, "away0"),
    "log": (gc.log, "positive"),
    "exp": (gc.exp, "any"),
    "sigmoid": (lambda t: gc.sigmoid(t * 3.0), "any"),
    "clamp01": (gc.clamp01, "unit_interior"),
    "leaky_relu": (gc.leaky_relu, "away0"),
    "mean": (lambda t: gc.mean(gc.square(t), axis=1), "any"),
    "sum": (lambda t: gc.tsum(gc.square(t), axis=(2, 3)), "any"),
    "pad": (lambda t: gc.pad(t, (1, 2, 0, 1)), "any"),
    "crop": (lambda t: gc.crop(t, 1, 1, 2, 3), "any"),
    "transpose": (lambda t: gc.transpose(t, (0, 2, 3, 1)), "any"),
    "conv2d": (lambda t: gc.conv2d(t, _W, _B, stride=1, padding=1), "any"),
    "conv2d_s2": (lambda t: gc.conv2d(t, _W, _B, stride=2, padding=1), "any"),
    "conv_transpose2d": (lambda t: gc.conv_transpose2d(t, _WT, _B, stride=2, padding=1), "any"),
    "avg_pool2d": (gc.avg_pool2d, "any"),
    "uniform_noise": (lambda t: gc.add_uniform_noise(t, np.random.default_rng(0)), "any"),
    "round_ste_surrogate": (lambda t: gc.round_ste(t) - gc.round_ste(t.detach()) + t.detach(), "any"),
    "gather": (lambda t: gc.gather(t, _IDX, _GW), "any"),
}


def _sample(kind, rng):
    x = rng.normal(size=(1, 2, 4, 4))
    if kind == "positive":
        x = np.abs(x) + 0.2
    elif kind == "away0":
        x = np.sign(x) * (np.abs(x) + 0.05)
    elif kind == "unit_interior":
        x = rng.uniform(-0.5, 1.5, size=x.shape)
        x[np.abs(x) < 0.01] += 0.02
        x[np.abs(x - 1) < 0.01] += 0.02
    return x


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    op, kind = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    proj = rng.normal(size=64)
    worst = 0.0
    for _ in range(100):
        x = _sample(kind, rng)

        def f(t):
            out = op(t)
            p = proj[: out.size].reshape(out.shape) if out.size <= 64 else np.resize(proj, out.shape)
            return gc.tsum(out * p)

        _, g = gc.grad(f, x)
        num = fd_grad(lambda v: f(Tensor(v)).item(), x, h=1e-6)
        err = np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-8)
        worst = max(worst, err)
    assert worst <= 1e-4, f"{name}: relative error {worst:.2e}"


@pytest.mark.parametrize("shape,k,s", [((2, 3, 9, 8), 3, 1), ((1, 4, 16, 16), 5, 2), ((3, 2, 7, 7), 4, 2)])
def test_kernel_backends_bit_identical(shape, k, s):
    if "cython" not in kernels.available():
        pytest.skip("extension not built")
    rng = np.random.default_rng(0)
    x = rng.normal(size=shape)
    idx = rng.integers(0, 50, size=300)
    outs = {}
    for name in ("python", "cython"):
        kernels.use_backend(name)
        cols = kernels.im2col(x, k, k, s)
        back = kernels.col2im(cols * 1.37, shape, k, k, s)
        sa = kernels.scatter_add(50, idx, np.arange(300) * 0.1)
        outs[name] = (cols, back, sa)
    kernels.use_backend("cython")
    for a, b in zip(outs["python"], outs["cython"]):
        assert a.tobytes() == b.tobytes()
