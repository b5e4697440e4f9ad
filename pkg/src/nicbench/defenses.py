"""Input-transformation defenses wrapped around a codec: g = T^-1 . C . T.

A :class:`DefenseTransform` is sampled once (seeded), then applied with
:func:`apply_pre` before the codec and :func:`apply_post` after it. Both act on
(N, 3, H, W) tensors and are differentiable, so :class:`DefendedCodec` can be
attacked end to end.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nicbench import geometry
from nicbench import gradcore as gc
from nicbench.gradcore import Tensor
from nicbench.images import check_image, to_image, to_tensor

DEFENSE_KINDS = (
    "identity",
    "flip",
    "random_roll",
    "random_rotate",
    "random_color_reorder",
    "random_ensemble",
    "geometric_self_ensemble",
    "smoothing_purifier",
)
RANDOM_KINDS = ("random_roll", "random_rotate", "random_color_reorder", "random_ensemble")
ENSEMBLE_LENGTH = 10
ENSEMBLE_WEIGHTS = {"roll": 4, "rotate": 4, "color": 1}
SMOOTHING_TAPS = 5
SMOOTHING_SIGMA = 0.8


class DefenseError(ValueError):
    pass


@dataclass(frozen=True)
class Action:
    """One sampled, invertible step.

    roll: params = (dim, shift); rotate: params = (theta, pad, shape_before);
    color: params = permutation; flip and blur take none.
    """

    kind: str
    params: tuple = ()


@dataclass(frozen=True)
class DefenseTransform:
    kind: str
    seed: int | None = None
    actions: tuple | None = None

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise DefenseError(f"unknown defense {self.kind!r}; expected one of {DEFENSE_KINDS}")

    @property
    def sampled(self):
        return self.actions is not None

    @property
    def exact(self):
        """True when post(pre(x)) == x holds bit for bit."""
        if self.kind == "smoothing_purifier":
            return False
        return all(a.kind != "rotate" or a.params[0] % 90 == 0 for a in self.actions or ())


def _sample_action(kind, rng, shape):
    h, w = shape
    if kind == "roll":
        dim = int(rng.integers(2, 4))
        return Action("roll", (dim, int(rng.integers(0, (h, w)[dim - 2])))), shape
    if kind == "rotate":
        theta = int(rng.integers(0, 360))
        pad = geometry.circumscribing_pad(h, w)
        return Action("rotate", (theta, pad, (h, w))), (h + pad[0] + pad[1], w + pad[2] + pad[3])
    if kind == "color":
        return Action("color", tuple(int(i) for i in rng.permutation(3))), shape
    raise DefenseError(f"unknown action {kind!r}")


def _plane_shape(shape):
    """(H, W) from an (H, W), (H, W, 3) or (N, C, H, W) shape."""
    shape = tuple(int(s) for s in shape)
    return shape[:2] if len(shape) == 3 else shape[-2:]


def sample(kind, seed, shape):
    """Draw the parameters of a ``kind`` transform for images of (H, W) ``shape``."""
    t = DefenseTransform(kind, seed)
    rng = np.random.default_rng([int(seed), DEFENSE_KINDS.index(kind)])
    shape = _plane_shape(shape)
    if kind in ("identity", "geometric_self_ensemble"):
        actions = ()
    elif kind == "flip":
        actions = (Action("flip"),)
    elif kind == "smoothing_purifier":
        actions = (Action("blur"),)
    elif kind == "random_roll":
        actions = (_sample_action("roll", rng, shape)[0],)
    elif kind == "random_rotate":
        actions = (_sample_action("rotate", rng, shape)[0],)
    elif kind == "random_color_reorder":
        actions = (_sample_action("color", rng, shape)[0],)
    else:
        return random_ensemble_sample(seed, shape)
    return DefenseTransform(t.kind, t.seed, actions)


def random_ensemble_sample(seed, shape):
    """Ten actions drawn 4:4:1 from roll, rotate and colour reorder."""
    rng = np.random.default_rng([int(seed), DEFENSE_KINDS.index("random_ensemble")])
    names = list(ENSEMBLE_WEIGHTS)
    p = np.array(list(ENSEMBLE_WEIGHTS.values()), dtype=float)
    p /= p.sum()
    actions = []
    shape = _plane_shape(shape)
    for _ in range(ENSEMBLE_LENGTH):
        a, shape = _sample_action(names[rng.choice(len(names), p=p)], rng, shape)
        actions.append(a)
    return DefenseTransform("random_ensemble", seed, tuple(actions))


def gaussian_blur(t, taps=SMOOTHING_TAPS, sigma=SMOOTHING_SIGMA):
    n, c, h, w = t.shape
    r = np.arange(taps) - (taps - 1) / 2
    g = np.exp(-r ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    half = taps // 2
    flat = gc.reshape(t, (n * c, 1, h, w))
    flat = geometry.reflect_pad(flat, half, half, half, half)
    flat = gc.conv2d(flat, g.reshape(1, 1, taps, 1))
    flat = gc.conv2d(flat, g.reshape(1, 1, 1, taps))
    return gc.reshape(flat, (n, c, h, w))


def _forward_action(a, t):
    if a.kind == "flip":
        return geometry.flip(t)
    if a.kind == "roll":
        dim, shift = a.params
        return geometry.roll(t, shift, dim)
    if a.kind == "rotate":
        theta, pad, _ = a.params
        return geometry.rotate(geometry.reflect_pad(t, *pad), theta)
    if a.kind == "color":
        return geometry.permute_channels(t, a.params)
    if a.kind == "blur":
        return gaussian_blur(t)
    raise DefenseError(f"unknown action {a.kind!r}")


def _inverse_action(a, t):
    if a.kind == "flip":
        return geometry.flip(t)
    if a.kind == "roll":
        dim, shift = a.params
        return geometry.roll(t, -shift, dim)
    if a.kind == "rotate":
        theta, pad, (h, w) = a.params
        return geometry.crop(geometry.rotate(t, -theta), pad[0], pad[2], h, w)
    if a.kind == "color":
        return geometry.permute_channels(t, np.argsort(a.params))
    if a.kind == "blur":
        return t
    raise DefenseError(f"unknown action {a.kind!r}")


def _wrap(fn, x):
    if isinstance(x, Tensor):
        return fn(x)
    return to_image(fn(to_tensor(check_image(x))))


def _require(t):
    if not isinstance(t, DefenseTransform) or not t.sampled:
        raise DefenseError("transform parameters have not been sampled; call sample() first")


def apply_pre(t, x):
    _require(t)

    def run(v):
        for a in t.actions:
            v = _forward_action(a, v)
        return v
    return _wrap(run, x)


def apply_post(t, y):
    _require(t)

    def run(v):
        for a in reversed(t.actions):
            v = _inverse_action(a, v)
        return v
    return _wrap(run, y)


# ---------------------------------------------------------------------------
# dihedral self-ensemble

D4_SIZE = 8


def d4_forward(t, k):
    """Variant k of the dihedral group: rot90 by k % 4, preceded by a transpose when k >= 4."""
    if k >= 4:
        t = geometry.transpose_hw(t)
    return geometry.rot90(t, k % 4) if k % 4 else t


def d4_inverse(t, k):
    if k % 4:
        t = geometry.rot90(t, -(k % 4))
    return geometry.transpose_hw(t) if k >= 4 else t


def self_ensemble_candidates(codec, x, mode="hard"):
    """[(reconstruction tensor, bpp tensor)] for the 8 dihedral variants of tensor ``x``."""
    out = []
    for k in range(D4_SIZE):
        yhat, rate = codec.forward(d4_forward(x, k), mode)
        out.append((d4_inverse(yhat, k), rate))
    return out


def _pick(candidates, x):
    errs = [float(np.mean((c.data - x.data) ** 2)) for c, _ in candidates]
    best = int(np.argmin(errs))  # first minimum wins ties
    return best, errs


def geometric_self_ensemble(codec, x):
    """Reconstruction of image ``x`` with the lowest MSE over the 8 dihedral variants.

    Returns (image, variant id).
    """
    xt = to_tensor(check_image(x))
    cands = self_ensemble_candidates(codec, xt)
    k, _ = _pick(cands, xt)
    return to_image(cands[k][0]), k


# ---------------------------------------------------------------------------
# defended codec


class DefendedCodec:
    """Codec-like wrapper computing T^-1(C(T(x))).

    Randomised kinds draw fresh parameters on every call, seeded from
    ``(seed, call counter)``; :meth:`reset` rewinds the counter.
    """

    def __init__(self, codec, kind="identity", seed=0):
        if kind not in DEFENSE_KINDS:
            raise DefenseError(f"unknown defense {kind!r}; expected one of {DEFENSE_KINDS}")
        self.codec, self.kind, self.seed = codec, kind, int(seed)
        self.calls = 0
        self.last_transform = None
        self.last_choice = None
        self.id = f"{getattr(codec, 'id', 'codec')}+{kind}"
        self.param_count = getattr(codec, "param_count", 0)

    def reset(self, seed=None):
        if seed is not None:
            self.seed = int(seed)
        self.calls = 0

    def _next_seed(self):
        s = np.random.SeedSequence([self.seed, self.calls]).generate_state(1)[0]
        self.calls += 1
        return int(s)

    def transform_for(self, shape):
        return sample(self.kind, self._next_seed(), shape)

    def forward(self, x, mode="hard", rng=None, noise=None):
        x = gc.as_tensor(x)
        if self.kind == "identity":
            return self.codec.forward(x, mode)
        if self.kind == "geometric_self_ensemble":
            cands = self_ensemble_candidates(self.codec, x, mode)
            k, _ = _pick(cands, x)
            self.last_choice = k
            return cands[k]
        t = self.transform_for(x.shape)
        self.last_transform = t
        yhat, rate = self.codec.forward(apply_pre(t, x), mode)
        return apply_post(t, yhat), rate

    def rate(self, x, mode="hard", rng=None):
        return self.forward(x, mode)[1]

    def compress(self, image):
        xhat, r = self.forward(to_tensor(check_image(image)), "hard")
        return to_image(xhat), r.item()


def defended_codec(codec, kind, seed=0):
    return DefendedCodec(codec, kind, seed)


def rotation_roundtrip_error(x, theta):
    """Mean absolute error of post(pre(x)) for a single rotation by ``theta`` degrees."""
    h, w = check_image(x).shape[:2]
    pad = geometry.circumscribing_pad(h, w)
    t = DefenseTransform("random_rotate", None, (Action("rotate", (theta, pad, (h, w))),))
    return float(np.mean(np.abs(apply_post(t, apply_pre(t, x)) - x)))

