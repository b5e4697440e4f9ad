"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps an ``ndarray``. Every primitive that sees an input with
``requires_grad`` set records a node (its parents plus a closure computing the
parents' gradients). :func:`backward` sorts the recorded graph topologically
into a :class:`Tape` and walks it in reverse.

Only the operators needed by the codecs, the quality metrics and the attack
objectives are provided.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from nicbench import kernels

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes incompatible with an operator."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise GradError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op, nondiff=False):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out.op = op + ("!" if nondiff else "")
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), bw, "div")


def scale(a, c):
    """Multiply by a python scalar."""
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a):
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a):
    """Square root; the gradient at exactly zero is taken as 0."""
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return _node(out, (a,), bw, "sqrt")


def power(a, p):
    """``a ** p`` for a >= 0 and a python scalar exponent; zero gradient at a == 0."""
    p = float(p)
    out = np.power(a.data, p)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(a.data > 0, p * np.power(a.data, p - 1.0), 0.0)
        return (g * d,)

    return _node(out, (a,), bw, "power")


def tabs(a):
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient 1 inside the interval (ends included), 0 outside."""
    x = a.data
    out = np.clip(x, lo, hi)
    mask = np.ones_like(x)
    if lo is not None:
        mask[x < lo] = 0.0
    if hi is not None:
        mask[x > hi] = 0.0
    return _node(out, (a,), lambda g: (g * mask,), "clamp")


def clamp01(a):
    return clamp(a, 0.0, 1.0)


def leaky_relu(a, slope=0.2):
    x = a.data
    d = np.where(x >= 0, 1.0, slope)
    return _node(x * d, (a,), lambda g: (g * d,), "leaky_relu")


def round_ste(a):
    """Round in the forward pass, identity gradient in the backward pass."""
    return _node(np.round(a.data), (a,), lambda g: (g,), "round_ste")


def round_hard(a):
    """Round with the true (almost-everywhere zero) derivative."""
    return _node(np.round(a.data), (a,), lambda g: (np.zeros_like(g),), "round", nondiff=True)


def add_uniform_noise(a, rng=None, noise=None):
    """Add U(-0.5, 0.5) noise drawn from ``rng`` (or an explicit ``noise`` array)."""
    if noise is None:
        noise = rng.uniform(-0.5, 0.5, size=a.shape)
    noise = np.asarray(noise, dtype=DTYPE)
    if noise.shape != a.shape:
        raise ShapeError("uniform_noise", a.shape, noise.shape)
    return _node(a.data + noise, (a,), lambda g: (g,), "uniform_noise")


# --------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None):
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _node(out, tuple(tensors), bw, "concat")


def gather(a, index, weights=None, shape=None):
    """General linear resampling: ``out.flat[k] = sum_j w[k, j] * a.flat[index[k, j]]``.

    ``index`` has shape ``out_shape`` or ``out_shape + (J,)`` (with matching
    ``weights``). Flips, rolls, channel permutations, reflect padding, crops and
    bilinear rotation are all expressed this way.
    """
    flat = a.data.reshape(-1)
    index = np.asarray(index)
    if weights is None:
        out_shape = index.shape if shape is None else tuple(shape)
        out = flat[index].reshape(out_shape)
    else:
        weights = np.asarray(weights, dtype=DTYPE)
        if weights.shape != index.shape:
            raise ShapeError("gather", index.shape, weights.shape)
        out_shape = index.shape[:-1] if shape is None else tuple(shape)
        out = (flat[index] * weights).sum(axis=-1).reshape(out_shape)
    if index.size and (index.min() < 0 or index.max() >= flat.size):
        raise ShapeError("gather", a.shape, index.shape, detail="index out of range")

    def bw(g):
        if weights is None:
            vals = g.reshape(-1)
        else:
            vals = (g.reshape(g.size, 1) * weights.reshape(g.size, -1)).reshape(-1)
        return (kernels.scatter_add(flat.size, index.reshape(-1), vals).reshape(a.shape),)

    return _node(out, (a,), bw, "gather")


def pad(a, widths, value=0.0):
    """Constant padding of the last two axes: ``widths = (top, bottom, left, right)``."""
    t, b, l, r = widths
    pw = [(0, 0)] * (a.ndim - 2) + [(t, b), (l, r)]
    out = np.pad(a.data, pw, mode="constant", constant_values=value)
    h, w = a.shape[-2:]

    def bw(g):
        return (g[..., t:t + h, l:l + w],)

    return _node(out, (a,), bw, "pad")


def crop(a, top, left, h, w):
    H, W = a.shape[-2:]
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise ShapeError("crop", a.shape, (h, w), detail=f"offset ({top}, {left})")

    def bw(g):
        full = np.zeros(a.shape)
        full[..., top:top + h, left:left + w] = g
        return (full,)

    return _node(a.data[..., top:top + h, left:left + w], (a,), bw, "crop")


# --------------------------------------------------------------------------
# convolution family (NCHW)


def _check_conv(op, x, w, cin_axis):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[cin_axis]:
        raise ShapeError(op, x.shape, w.shape)


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of x (N, C, H, W) with w (O, C, kh, kw), zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv("conv2d", x, w, 1)
    ph, pw_ = (padding, padding) if np.isscalar(padding) else padding
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw_, pw_))) if (ph or pw_) else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, o, 1, 1)
        parents.append(b)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2)
            gxp = kernels.col2im(gcols, xp.shape, kh, kw, stride)
            gx = gxp[:, :, ph:ph + h, pw_:pw_ + wd]
        if w.requires_grad:
            gw = np.einsum("nol,nkl->ok", g2, cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _node(out, tuple(parents), bw, "conv2d")


def conv_transpose2d(x, w, b=None, stride=1, padding=0, output_padding=0):
    """Adjoint of :func:`conv2d`: x (N, Cin, H, W), w (Cin, Cout, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv("conv_transpose2d", x, w, 0)
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    hf = (h - 1) * stride + kh + output_padding
    wf = (wd - 1) * stride + kw + output_padding
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv_transpose2d", x.shape, w.shape, detail="empty output")
    wmat = w.data.reshape(cin, cout * kh * kw)
    xf = x.data.reshape(n, cin, h * wd)
    cols = np.matmul(wmat.T, xf)
    full = kernels.col2im(cols, (n, cout, hf, wf), kh, kw, stride)
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, cout, 1, 1)
        parents.append(b)

    def bw(g):
        gfull = np.zeros((n, cout, hf, wf))
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        gcols = kernels.im2col(gfull, kh, kw, stride)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wmat, gcols).reshape(x.shape)
        if w.requires_grad:
            gw = np.einsum("ncl,nkl->ck", xf, gcols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _node(np.ascontiguousarray(out), tuple(parents), bw, "conv_transpose2d")


def avg_pool2d(a, k=2):
    """Non-overlapping k x k average pooling; trailing rows/cols that do not fill a window are dropped."""
    *lead, h, w = a.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError("avg_pool2d", a.shape, (k, k))
    core = a.data[..., :ho * k, :wo * k]
    out = core.reshape(*lead, ho, k, wo, k).mean(axis=(-3, -1))

    def bw(g):
        full = np.zeros(a.shape)
        up = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
        full[..., :ho * k, :wo * k] = up
        return (full,)

    return _node(out, (a,), bw, "avg_pool2d")


# --------------------------------------------------------------------------
# composites


def l2norm(a):
    return sqrt(tsum(square(a)))


def mse(a, b):
    return mean(square(sub(a, b)))


# --------------------------------------------------------------------------
# backward pass


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: list = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [n.op for n in self.nodes]


def build_tape(loss):
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return Tape(order)


def backward(loss, tape=None):
    """Gradient of scalar ``loss`` w.r.t. every reachable ``requires_grad`` leaf.

    Returns a dict keyed by leaf tensor; each leaf's ``.grad`` is also set.
    """
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = tape or build_tape(loss)
    pending = {id(loss): np.ones(loss.shape)}
    result = {}
    for t in reversed(tape.nodes):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            result[t] = g
            t.grad = g
            continue
        for p, gp in zip(t._parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            gp = np.asarray(gp, dtype=DTYPE).reshape(p.shape)
            prev = pending.get(id(p))
            pending[id(p)] = gp if prev is None else prev + gp
    return result


def grad(fn, x):
    """Value and gradient of scalar ``fn`` at ndarray ``x``."""
    xt = Tensor(np.array(x, dtype=DTYPE), requires_grad=True)
    out = fn(xt)
    grads = backward(out)
    return out.item(), grads.get(xt, np.zeros_like(xt.data))


def graph_has_nondiff(loss):
    return any(n.op.endswith("!") for n in build_tape(loss).nodes)


# --------------------------------------------------------------------------
# finite-difference verification


@dataclass
class FDReport:
    passed: bool
    max_abs: float
    max_rel: float
    checked: int
    status: str  # "pass" | "fail" | "non-differentiable point"
    worst_index: int = -1

    def __str__(self):
        return (f"{self.status}: checked={self.checked} max_abs={self.max_abs:.3e} "
                f"max_rel={self.max_rel:.3e}")


def finite_diff_check(f, x, step=1e-3, tol=1e-4, max_elems=None, directions=None, seed=0):
    """Compare the autodiff gradient of scalar ``f`` at ``x`` with central differences.

    Elementwise by default (optionally on a random subset of ``max_elems``
    coordinates); with ``directions=k`` it checks k random directional
    derivatives instead. Relative error uses the larger of the two magnitudes,
    floored at 1e-3 of the largest reference magnitude so near-zero entries of a
    large gradient do not dominate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    f0 = out.item()
    if not np.isfinite(f0):
        raise GradError("f is not finite at the base point")
    nondiff = graph_has_nondiff(out)
    g = backward(out).get(xt, np.zeros_like(x)).reshape(-1)

    def ev(v):
        val = f(Tensor(v.reshape(x.shape))).item()
        if not np.isfinite(val):
            raise GradError("f is not finite at a perturbed point")
        return val

    rng = np.random.default_rng(seed)
    flat = x.reshape(-1)
    auto, numeric, kinks = [], [], []
    if directions:
        for _ in range(directions):
            u = rng.standard_normal(flat.size)
            u /= np.linalg.norm(u)
            fp, fm = ev(flat + step * u), ev(flat - step * u)
            auto.append(g @ u)
            numeric.append((fp - fm) / (2 * step))
            kinks.append(abs((fp - f0) - (f0 - fm)) / step)
    else:
        idx = np.arange(flat.size)
        if max_elems is not None and max_elems < flat.size:
            idx = np.sort(rng.choice(flat.size, size=max_elems, replace=False))
        for i in idx:
            v = flat.copy()
            v[i] += step
            fp = ev(v)
            v[i] -= 2 * step
            fm = ev(v)
            auto.append(g[i])
            numeric.append((fp - fm) / (2 * step))
            kinks.append(abs((fp - f0) - (f0 - fm)) / step)
    auto, numeric, kinks = np.array(auto), np.array(numeric), np.array(kinks)
    diff = np.abs(auto - numeric)
    floor = max(1e-3 * np.max(np.abs(numeric), initial=0.0), 1e-12)
    rel = diff / np.maximum(np.maximum(np.abs(auto), np.abs(numeric)), floor)
    worst = int(np.argmax(rel)) if rel.size else -1
    passed = bool(np.all(rel <= tol))
    status = "pass"
    if not passed:
        # one-sided slopes disagreeing at a failing coordinate means a kink or jump
        bad = rel > tol
        jump = np.any(kinks[bad] > np.maximum(10 * tol * np.abs(numeric[bad]), 1e-6))
        status = "non-differentiable point" if (nondiff or jump) else "fail"
    return FDReport(passed, float(diff.max(initial=0.0)), float(rel.max(initial=0.0)),
                    int(diff.size), status, worst)
