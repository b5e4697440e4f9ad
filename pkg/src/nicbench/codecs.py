"""Small differentiable image codecs: analysis transform, quantizer, synthesis
transform and a logistic entropy model, trained on rate + distortion.

Two families:

``factorized``
    per-channel logistic density on the latent.
``hyperprior-lite``
    a second, smaller latent is coded with its own factorized density and its
    decoded output rescales the per-element logistic scales of the main latent.

Quantization modes: ``noise`` (additive U(-0.5, 0.5), used for training),
``ste`` (rounding with straight-through gradient, used by white-box attacks)
and ``hard`` (rounding, no gradient).
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from nicbench import geometry
from nicbench import gradcore as gc
from nicbench.gradcore import Tensor
from nicbench.images import check_image, to_image, to_tensor

log = logging.getLogger(__name__)

FAMILIES = ("factorized", "hyperprior-lite")
MODES = ("noise", "ste", "hard", "soft")
LIKELIHOOD_FLOOR = 1e-9
SCALE_FLOOR = 0.11
DEFAULT_LAMBDAS = (0.001, 0.005, 0.025)

MAGIC = b"NRBCODEC"
FORMAT_VERSION = 1


class CodecError(ValueError):
    pass


class CodecFormatError(CodecError):
    """Unreadable, truncated or incompatible parameter file."""


class TrainingError(RuntimeError):
    pass


# rate floor events (likelihood clamped to LIKELIHOOD_FLOOR); read by diagnostics
floor_counter = {"count": 0}


@dataclass(frozen=True)
class CodecSpec:
    family: str = "factorized"
    latent_channels: int = 8
    downsample_factor: int = 4
    lmbda: float = 0.005
    seed: int = 0
    hidden_channels: int = 16
    hyper_channels: int = 4

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise CodecError(f"unknown codec family {self.family!r}; expected one of {FAMILIES}")
        f = self.downsample_factor
        if f < 1 or f & (f - 1) or f > 16:
            raise CodecError(f"downsample_factor must be a power of two in [1, 16], got {f}")
        if self.latent_channels < 1 or self.hidden_channels < 1 or self.hyper_channels < 1:
            raise CodecError("channel counts must be positive")
        if self.lmbda < 0:
            raise CodecError("lambda must be >= 0")

    @property
    def n_down(self):
        return int(math.log2(self.downsample_factor))

    @property
    def pad_multiple(self):
        return self.downsample_factor * (2 if self.family == "hyperprior-lite" else 1)

    @property
    def tag(self):
        return f"{self.family}-l{self.lmbda:g}"


@dataclass
class LatentCode:
    y_hat: Tensor
    likelihoods: Tensor
    height: int
    width: int
    pad: tuple
    z_hat: Tensor | None = None
    z_likelihoods: Tensor | None = None
    floored: int = 0

    @property
    def bits(self):
        return bits(self)


# ---------------------------------------------------------------------------
# architecture


def _layer_plan(spec):
    """(name, kind, in, out, kernel, stride) for every layer."""
    n, m, hc = spec.hidden_channels, spec.latent_channels, spec.hyper_channels
    plan = []
    for i in range(4):
        cin = 3 if i == 0 else n
        cout = m if i == 3 else n
        down = i < spec.n_down
        plan.append((f"enc{i}", "conv", cin, cout, 5 if down else 3, 2 if down else 1))
    for i in range(4):
        cin = m if i == 0 else n
        cout = 3 if i == 3 else n
        up = i >= 4 - spec.n_down
        plan.append((f"dec{i}", "tconv" if up else "conv", cin, cout, 4 if up else 3, 2 if up else 1))
    if spec.family == "hyperprior-lite":
        plan += [
            ("hen0", "conv", m, n, 3, 2),
            ("hen1", "conv", n, hc, 3, 1),
            ("hdec0", "tconv", hc, n, 4, 2),
            ("hdec1", "conv", n, m, 3, 1),
        ]
    return plan


def init_params(spec):
    rng = np.random.default_rng([spec.seed, 7919])
    params = {}
    for name, kind, cin, cout, k, _ in _layer_plan(spec):
        fan_in = cin * k * k
        std = math.sqrt(2.0 / ((1 + 0.2 ** 2) * fan_in))
        shape = (cout, cin, k, k) if kind == "conv" else (cin, cout, k, k)
        if kind == "tconv":
            std /= 2.0  # stride-2 transposed conv sums ~k*k/4 taps per output
        params[f"{name}.w"] = rng.normal(0.0, std, size=shape)
        params[f"{name}.b"] = np.zeros(cout)
    params["dec3.b"] = np.full(3, 0.5)
    params["hdec1.b"] = np.zeros(spec.latent_channels)
    m = spec.latent_channels
    params["y.loc"] = np.zeros(m)
    params["y.log_scale"] = np.zeros(m)
    if spec.family == "hyperprior-lite":
        params["z.loc"] = np.zeros(spec.hyper_channels)
        params["z.log_scale"] = np.zeros(spec.hyper_channels)
    return {k: _f32(v) for k, v in params.items()}


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _apply(params, name, kind, x, stride, leaky):
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    k = w.shape[-1]
    if kind == "conv":
        out = gc.conv2d(x, w, b, stride=stride, padding=k // 2)
    else:
        out = gc.conv_transpose2d(x, w, b, stride=stride, padding=1)
    return gc.leaky_relu(out) if leaky else out


def _stack(spec, params, prefix, x):
    layers = [p for p in _layer_plan(spec) if p[0].startswith(prefix)]
    for i, (name, kind, _, _, _, stride) in enumerate(layers):
        x = _apply(params, name, kind, x, stride, leaky=i < len(layers) - 1)
    return x


def _quantize(y, mode, rng, noise):
    if mode == "noise":
        if rng is None and noise is None:
            raise CodecError("noise mode needs an rng or explicit noise")
        return gc.add_uniform_noise(y, rng, noise)
    if mode == "ste":
        return gc.round_ste(y)
    if mode == "soft":
        # no quantisation; used for unquantised-gradient attacks
        return y
    if mode == "hard":
        return gc.round_hard(y) if y.requires_grad else Tensor(np.round(y.data))
    raise CodecError(f"unknown mode {mode!r}; expected one of {MODES}")


def logistic_likelihood(v, loc, scale):
    """P(v - 0.5 < Y < v + 0.5) for Y ~ Logistic(loc, scale), tail-stable."""
    v, loc, scale = gc.as_tensor(v), gc.as_tensor(loc), gc.as_tensor(scale)
    centred = gc.sub(v, loc)
    sgn = -np.sign(centred.data)
    sgn[sgn == 0] = -1.0
    sgn = Tensor(sgn)
    upper = gc.sigmoid(gc.div(gc.mul(sgn, gc.add(centred, 0.5)), scale))
    lower = gc.sigmoid(gc.div(gc.mul(sgn, gc.sub(centred, 0.5)), scale))
    p = gc.tabs(gc.sub(upper, lower))
    n_floor = int(np.count_nonzero(p.data < LIKELIHOOD_FLOOR))
    if n_floor:
        floor_counter["count"] += n_floor
    return gc.clamp(p, lo=LIKELIHOOD_FLOOR), n_floor


def _channel(a):
    if isinstance(a, Tensor):
        return gc.reshape(a, (1, -1, 1, 1))
    return Tensor(np.asarray(a).reshape(1, -1, 1, 1))


def _encode(spec, params, x, mode, rng=None, noise=None):
    """x: (N, 3, H, W) tensor in [0, 1]."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise CodecError(f"expected (N, 3, H, W) input, got {x.shape}")
    n, _, h, w = x.shape
    if h == 0 or w == 0:
        raise CodecError("empty image")
    mult = spec.pad_multiple
    ph, pw = (-h) % mult, (-w) % mult
    pad = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    xp = geometry.reflect_pad(x, *pad)
    y = _stack(spec, params, "enc", xp)
    y_noise = noise.get("y") if noise else None
    y_hat = _quantize(y, mode, rng, y_noise)
    loc = _channel(params["y.loc"])
    base_scale = gc.exp(_channel(params["y.log_scale"]))
    z_hat = z_lik = None
    floored = 0
    if spec.family == "hyperprior-lite":
        z = _stack(spec, params, "hen", gc.tabs(y))
        z_hat = _quantize(z, mode, rng, noise.get("z") if noise else None)
        z_lik, nf = logistic_likelihood(z_hat, _channel(params["z.loc"]),
                                        gc.exp(_channel(params["z.log_scale"])))
        floored += nf
        hyp = _stack(spec, params, "hdec", z_hat)
        scale = gc.clamp(gc.mul(base_scale, gc.exp(hyp)), lo=SCALE_FLOOR)
    else:
        scale = base_scale
    lik, nf = logistic_likelihood(y_hat, loc, scale)
    floored += nf
    return LatentCode(y_hat, lik, h, w, pad, z_hat, z_lik, floored)


def bits(code):
    total = gc.tsum(gc.log(code.likelihoods))
    if code.z_likelihoods is not None:
        total = gc.add(total, gc.tsum(gc.log(code.z_likelihoods)))
    return gc.scale(total, -1.0 / math.log(2.0))


def bpp(code):
    """Estimated bits per pixel, averaged over the batch (differentiable)."""
    n = code.y_hat.shape[0]
    return gc.scale(bits(code), 1.0 / (n * code.height * code.width))


def _decode(spec, params, code):
    exp_c = spec.latent_channels
    yh = code.y_hat
    if yh.ndim != 4 or yh.shape[1] != exp_c:
        raise CodecError(f"latent has shape {yh.shape}; codec expects {exp_c} channels")
    t, b, l, r = code.pad
    hp, wp = code.height + t + b, code.width + l + r
    f = spec.downsample_factor
    if yh.shape[2] * f != hp or yh.shape[3] * f != wp:
        raise CodecError(
            f"latent extents {yh.shape[2:]} inconsistent with image {code.height}x{code.width} "
            f"(padded {hp}x{wp}, factor {f})"
        )
    out = _stack(spec, params, "dec", yh)
    out = gc.crop(out, t, l, code.height, code.width)
    return gc.clamp01(out)


# ---------------------------------------------------------------------------
# public codec objects


class CodecVariant:
    """A trained codec. Parameters are read-only after construction."""

    def __init__(self, spec, params, metadata=None):
        self.spec = spec
        missing = {k for k in init_params_shapes(spec)} - set(params)
        if missing:
            raise CodecError(f"missing parameters: {sorted(missing)}")
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        for v in self.params.values():
            v.setflags(write=False)
        self.metadata = dict(metadata or {})
        self.id = self.metadata.get("id", spec.tag)

    def __repr__(self):
        return f"CodecVariant({self.id}, params={self.param_count})"

    @property
    def param_count(self):
        return int(sum(v.size for v in self.params.values()))

    def encode(self, x, mode="hard", rng=None, noise=None):
        return _encode(self.spec, self.params, gc.as_tensor(x), mode, rng, noise)

    def decode(self, code):
        return _decode(self.spec, self.params, code)

    def forward(self, x, mode="hard", rng=None, noise=None):
        """x: (N, 3, H, W) tensor. Returns (reconstruction tensor, bpp tensor)."""
        code = self.encode(x, mode, rng, noise)
        return self.decode(code), bpp(code)

    def rate(self, x, mode="hard", rng=None):
        return bpp(self.encode(x, mode, rng))

    def compress(self, image):
        """Hard-mode round trip of an (H, W, 3) image -> (reconstruction, bpp)."""
        xhat, r = self.forward(to_tensor(check_image(image)), "hard")
        return to_image(xhat), r.item()


class IdentityCodec:
    """C(x) = x. Rate reported as raw 8-bit RGB (24 bpp)."""

    id = "identity"
    param_count = 0

    def forward(self, x, mode="hard", rng=None, noise=None):
        x = gc.as_tensor(x)
        return x, Tensor(24.0)

    def rate(self, x, mode="hard", rng=None):
        return Tensor(24.0)

    def compress(self, image):
        return np.array(check_image(image)), 24.0


def init_params_shapes(spec):
    names = []
    for name, *_ in _layer_plan(spec):
        names += [f"{name}.w", f"{name}.b"]
    names += ["y.loc", "y.log_scale"]
    if spec.family == "hyperprior-lite":
        names += ["z.loc", "z.log_scale"]
    return names


def encode(variant, x, mode="hard", rng=None):
    return variant.encode(x, mode, rng)


def decode(variant, code):
    return variant.decode(code)


def forward(variant, x, mode="hard", rng=None):
    return variant.forward(x, mode, rng)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    variant: CodecVariant
    loss_curve: list = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def _random_crops(images, batch, crop, rng):
    out = np.empty((batch, 3, crop, crop))
    for b in range(batch):
        img = images[rng.integers(len(images))]
        h, w = img.shape[:2]
        top = rng.integers(0, h - crop + 1)
        left = rng.integers(0, w - crop + 1)
        patch = img[top:top + crop, left:left + crop]
        if rng.random() < 0.5:
            patch = patch[:, ::-1]
        out[b] = patch.transpose(2, 0, 1)
    return out


def _rd_loss(spec, params, x, rng=None, noise=None):
    code = _encode(spec, params, x, "noise", rng, noise)
    xhat = _decode(spec, params, code)
    rate = bpp(code)
    dist = gc.mse(xhat, x)
    return gc.add(gc.scale(rate, spec.lmbda), dist), rate, dist


def frozen_rd_loss(variant, x0):
    """Rate-distortion loss with the rounding offsets fixed at ``x0``.

    At ``x0`` the value equals the hard-quantised loss; nearby it is smooth,
    which is what a finite-difference gradient check needs.
    """
    x0 = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0, dtype=np.float64))
    code = _encode(variant.spec, variant.params, x0, "soft")
    noise = {"y": np.round(code.y_hat.data) - code.y_hat.data}
    if code.z_hat is not None:
        noise["z"] = np.round(code.z_hat.data) - code.z_hat.data

    def loss(x):
        return _rd_loss(variant.spec, variant.params, x, noise=noise)[0]

    return loss


def train(spec, dataset, epochs=30, batch=8, lr=2e-3, seed=None, crop=32, steps_per_epoch=None,
          log_every=0):
    """Minimise lmbda * bpp + MSE with Adam in noise mode.

    ``dataset`` is a list of (H, W, 3) images at least ``crop`` px on each side.
    Returns a :class:`TrainResult`; its variant carries float32-representable
    parameters so saving is lossless.
    """
    if not dataset:
        raise TrainingError("empty training set")
    images = [check_image(im) for im in dataset]
    if min(min(im.shape[:2]) for im in images) < crop:
        raise TrainingError(f"training images must be at least {crop} px")
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng([seed, 104729])
    params = {k: Tensor(v, requires_grad=True) for k, v in init_params(spec).items()}
    m = {k: np.zeros_like(v.data) for k, v in params.items()}
    s = {k: np.zeros_like(v.data) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    steps = steps_per_epoch or max(1, len(images) // batch)

    eval_rng = np.random.default_rng([seed, 15485863])
    eval_x = Tensor(_random_crops(images, min(16, 2 * batch), crop, eval_rng))

    def eval_loss(p):
        return _rd_loss(spec, p, eval_x, np.random.default_rng([seed, 32452843]))[0].item()

    initial = eval_loss({k: v.data for k, v in params.items()})
    curve = []
    t = 0
    for epoch in range(epochs):
        acc = 0.0
        for _ in range(steps):
            x = Tensor(_random_crops(images, batch, crop, rng))
            loss, rate, dist = _rd_loss(spec, params, x, rng)
            if not np.isfinite(loss.item()):
                raise TrainingError(
                    f"loss diverged at epoch {epoch} step {t}: loss={loss.item()} "
                    f"bpp={rate.item()} mse={dist.item()}"
                )
            grads = gc.backward(loss)
            t += 1
            for k, p in params.items():
                g = grads.get(p)
                if g is None:
                    continue
                m[k] = b1 * m[k] + (1 - b1) * g
                s[k] = b2 * s[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1 ** t)
                sh = s[k] / (1 - b2 ** t)
                p.data = p.data - lr * mh / (np.sqrt(sh) + eps)
            acc += loss.item()
        curve.append(acc / steps)
        if log_every and (epoch + 1) % log_every == 0:
            log.info("%s epoch %d loss %.5f", spec.tag, epoch + 1, curve[-1])
    final_params = {k: _f32(v.data) for k, v in params.items()}
    final = eval_loss(final_params)
    meta = {
        "id": spec.tag,
        "epochs": epochs,
        "steps": t,
        "batch": batch,
        "lr": lr,
        "initial_loss": initial,
        "final_loss": final,
    }
    variant = CodecVariant(spec, final_params, meta)
    return TrainResult(variant, curve, initial, final)


# ---------------------------------------------------------------------------
# parameter files


def save_params(variant, path):
    names = sorted(variant.params)
    manifest, offset = [], 0
    for name in names:
        arr = variant.params[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "spec": asdict(variant.spec),
        "tensors": manifest,
        "metadata": variant.metadata,
        "param_count": variant.param_count,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for name in names:
            fh.write(np.asarray(variant.params[name], dtype="<f4").tobytes())


def read_header(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return _parse(blob, path)[0]


def _parse(blob, path):
    if len(blob) < len(MAGIC) + 6 or blob[:8] != MAGIC:
        raise CodecFormatError(f"{path}: not a codec parameter file (bad magic)")
    version, hlen = struct.unpack_from("<HI", blob, 8)
    if version != FORMAT_VERSION:
        raise CodecFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = 14
    if len(blob) < start + hlen:
        raise CodecFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CodecFormatError(f"{path}: corrupt header ({exc})") from None
    return header, blob[start + hlen:]


def load_params(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    header, payload = _parse(blob, path)
    try:
        spec = CodecSpec(**header["spec"])
        params = {}
        for entry in header["tensors"]:
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            lo, hi = entry["offset"], entry["offset"] + 4 * n
            if hi > len(payload):
                raise CodecFormatError(f"{path}: truncated tensor data for {entry['name']}")
            arr = np.frombuffer(payload[lo:hi], dtype="<f4").astype(np.float64)
            params[entry["name"]] = arr.reshape(entry["shape"])
    except (KeyError, TypeError) as exc:
        raise CodecFormatError(f"{path}: malformed header ({exc})") from None
    return CodecVariant(spec, params, header.get("metadata"))
