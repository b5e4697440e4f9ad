"""Adversarial attacks on image codecs.

Every attack takes an (H, W, 3) image in [0, 1] and returns an
:class:`AdversarialExample` whose perturbation lies in the L-inf ball of radius
``cfg.epsilon`` and whose pixels stay in [0, 1]. White-box attacks
differentiate through the codec in ``ste`` mode (FTDA uses the unquantised
``soft`` mode for its gradient); black-box attacks only call the codec in
``hard`` mode and count queries.

Iterative attacks return the best iterate seen, and ``trace[i]`` is the best
objective value after ``i`` updates, so ``trace[-1]`` is the objective at
``x_adv``.
"""
from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from nicbench import gradcore as gc
from nicbench import quality
from nicbench.gradcore import Tensor

OBJECTIVE_KINDS = (
    "ReconstructionL2",
    "FTDA_L2",
    "AddedNoises",
    "ReconstructionMSSSIM",
    "FTDAMSSSIM",
    "BppIncrease",
    "SourceReconstructionL2",
)
_NEEDS_CLEAN = {"FTDA_L2", "AddedNoises", "FTDAMSSSIM"}

PRESETS = {
    "preset-0": {"epsilon": 8 / 255, "steps": 50, "lr": 0.01},
    "preset-1": {"epsilon": 8 / 255, "steps": 100, "lr": 0.04},
}
GAUSSIAN_SIGMA = 10 / 255
LSE_TEMPERATURE = 50.0
NES_SIGMA = 0.001
ADAM_BETAS = (0.9, 0.999)
ADAM_FUZZ = 1e-8


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class Objective:
    """What the attacker maximises. ``y_only`` measures image distances on luma."""

    kind: str
    y_only: bool = False

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective {self.kind!r}; expected one of {OBJECTIVE_KINDS}")
        if self.kind == "BppIncrease" and self.y_only:
            object.__setattr__(self, "y_only", False)

    @property
    def label(self):
        return f"{self.kind}(Y)" if self.y_only else self.kind

    @classmethod
    def parse(cls, text):
        """``"ReconstructionL2"`` or ``"ReconstructionL2(Y)"``."""
        if isinstance(text, Objective):
            return text
        text = text.strip()
        if text.endswith("(Y)"):
            return cls(text[:-3], True)
        return cls(text)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = PRESETS["preset-0"]["epsilon"]
    steps: int = PRESETS["preset-0"]["steps"]
    lr: float = PRESETS["preset-0"]["lr"]
    seed: int = 0
    preset: str = "preset-0"

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError(f"steps must be a non-negative integer, got {self.steps}")
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")

    @classmethod
    def from_preset(cls, name="preset-0", **overrides):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], "preset": name, **overrides})

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


@dataclass
class AdversarialExample:
    x: np.ndarray
    x_adv: np.ndarray
    attack: str
    objective: Objective | None
    config: AttackConfig
    trace: list = field(default_factory=list)
    queries_used: int | None = None
    extras: dict = field(default_factory=dict)

    @property
    def linf(self):
        return float(np.max(np.abs(self.x_adv - self.x))) if self.x.size else 0.0

    def check(self, tol=1e-6):
        """Raise if the budget or range constraint is violated."""
        if self.linf > self.config.epsilon + tol:
            raise AttackError(f"{self.attack}: |x_adv - x|_inf = {self.linf} > {self.config.epsilon}")
        if self.x_adv.min() < 0 or self.x_adv.max() > 1:
            raise AttackError(f"{self.attack}: x_adv outside [0, 1]")
        return self


# ---------------------------------------------------------------------------
# helpers


def _as4(a):
    if isinstance(a, Tensor):
        return a
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        a = a.transpose(2, 0, 1)[None]
    return np.ascontiguousarray(a)


def _as_image(a4):
    return np.ascontiguousarray(a4[0].transpose(1, 2, 0))


def _rng(cfg, name):
    return np.random.default_rng([int(cfg.seed), zlib.crc32(name.encode())])


def project(x_adv, x, epsilon):
    """Clip onto the L-inf ball around ``x`` intersected with [0, 1]."""
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)


def _forward(codec, xa, mode):
    return codec.forward(xa, mode)


def _y(t, on):
    return quality.luma(t) if on else t


def clean_reconstruction(codec, x, mode="ste"):
    xhat, _ = _forward(codec, Tensor(_as4(x)), mode)
    return xhat.data


def objective_value(obj, x, x_adv, codec, mode="ste", clean=None):
    """Scalar tensor L(x, x', C(x), C(x')); differentiable w.r.t. ``x_adv``.

    ``obj`` may also be a callable ``f(x_adv_tensor) -> scalar tensor``, which
    bypasses the codec (used for analytic test surrogates).
    """
    xa = x_adv if isinstance(x_adv, Tensor) else Tensor(_as4(x_adv))
    if callable(obj) and not isinstance(obj, Objective):
        return obj(xa)
    obj = Objective.parse(obj)
    x4 = _as4(x)
    x4 = x4.data if isinstance(x4, Tensor) else x4
    if x4.shape != xa.shape:
        raise ValueError(f"objective_value: extent mismatch {x4.shape} vs {xa.shape}")
    xhat, rate = _forward(codec, xa, mode)
    kind = obj.kind
    if kind == "BppIncrease":
        return rate
    if kind in _NEEDS_CLEAN and clean is None:
        clean = clean_reconstruction(codec, x4, mode)
    on = obj.y_only
    if kind == "ReconstructionL2":
        return gc.l2norm(gc.sub(_y(xhat, on), _y(xa, on)))
    if kind == "SourceReconstructionL2":
        return gc.l2norm(gc.sub(_y(xhat, on), _y(Tensor(x4), on)))
    if kind == "FTDA_L2":
        return gc.l2norm(gc.sub(_y(xhat, on), _y(Tensor(clean), on)))
    if kind == "AddedNoises":
        diff = gc.sub(gc.sub(xhat, clean), gc.sub(xa, x4))
        return gc.l2norm(_y(diff, on))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", quality.ScaleReductionWarning)
        if kind == "ReconstructionMSSSIM":
            s = quality.ms_ssim_tensor(_y(xa, on), _y(xhat, on))
        else:
            s = quality.ms_ssim_tensor(_y(Tensor(clean), on), _y(xhat, on))
    return gc.sub(1.0, gc.tsum(s))


def _value_and_grad(obj, x4, xa, codec, mode, clean, name):
    t = Tensor(xa, requires_grad=True)
    out = objective_value(obj, x4, t, codec, mode, clean)
    grads = gc.backward(out)
    g = grads.get(t)
    if g is None:
        g = np.zeros_like(xa)
    v = out.item()
    if not (np.isfinite(v) and np.all(np.isfinite(g))):
        raise AttackError(f"{name}: non-finite objective or gradient (value={v})")
    return v, g


def _value(obj, x4, xa, codec, mode, clean):
    return objective_value(obj, x4, Tensor(xa), codec, mode, clean).item()


def _nonzero(g, rng):
    # A flat objective (e.g. identical reconstructions at x' = x) gives no
    # direction; take a seeded random one so the iteration can leave the plateau.
    if np.any(g):
        return g
    return rng.standard_normal(g.shape)


class _Best:
    def __init__(self, xa):
        self.value = -math.inf
        self.x = xa
        self.index = 0
        self.trace = []

    def see(self, v, xa):
        if v > self.value:
            self.value, self.x, self.index = v, xa, len(self.trace)
        self.trace.append(self.value)


def _finish(name, x4, best, obj, cfg, queries=None, extras=None):
    ex = AdversarialExample(
        x=_as_image(x4), x_adv=_as_image(best.x), attack=name,
        objective=obj if isinstance(obj, Objective) else None,
        config=cfg, trace=list(best.trace), queries_used=queries, extras=extras or {},
    )
    return ex.check()


def _ascent(name, codec, x, obj, cfg, step, init=None, grad_mode="ste"):
    """Shared projected-ascent loop. ``step(g, xa, k, rng) -> new iterate``."""
    x4 = _as4(x)
    rng = _rng(cfg, name)
    clean = None
    if not callable(obj) or isinstance(obj, Objective):
        obj = Objective.parse(obj)
        if obj.kind in _NEEDS_CLEAN:
            clean = clean_reconstruction(codec, x4, grad_mode)
    xa = x4.copy() if init is None or cfg.epsilon == 0 else project(init(x4, rng), x4, cfg.epsilon)
    best = _Best(xa)
    for k in range(cfg.steps):
        if grad_mode == "ste":
            v, g = _value_and_grad(obj, x4, xa, codec, "ste", clean, name)
        else:
            v = _value(obj, x4, xa, codec, "ste", clean)
            _, g = _value_and_grad(obj, x4, xa, codec, grad_mode, clean, name)
        best.see(v, xa)
        xa = project(step(_nonzero(g, rng), xa, k, rng), x4, cfg.epsilon)
    best.see(_value(obj, x4, xa, codec, "ste", clean), xa)
    return x4, best, obj


# ---------------------------------------------------------------------------
# white-box attacks


def ifgsm(codec, x, obj, cfg):
    """Iterated signed-gradient ascent from ``x``."""
    x4, best, obj = _ascent("ifgsm", codec, x, obj, cfg, lambda g, xa, k, r: xa + cfg.lr * np.sign(g))
    return _finish("ifgsm", x4, best, obj, cfg)


def pgd(codec, x, obj, cfg):
    """Signed-gradient ascent from a seeded uniform start inside the ball."""
    def init(x4, rng):
        return x4 + rng.uniform(-cfg.epsilon, cfg.epsilon, x4.shape)

    x4, best, obj = _ascent("pgd", codec, x, obj, cfg,
                            lambda g, xa, k, r: xa + cfg.lr * np.sign(g), init=init)
    return _finish("pgd", x4, best, obj, cfg, extras={"init_value": best.trace[0] if best.trace else None})


def ftda(codec, x, obj="FTDA_L2", cfg=None, sign=False):
    """Adam ascent on unquantised gradients; ``sign=True`` takes the sign of the Adam step."""
    cfg = cfg or AttackConfig()
    b1, b2 = ADAM_BETAS
    state = {"m": 0.0, "v": 0.0}

    def step(g, xa, k, rng):
        state["m"] = b1 * state["m"] + (1 - b1) * g
        state["v"] = b2 * state["v"] + (1 - b2) * g * g
        mh = state["m"] / (1 - b1 ** (k + 1))
        vh = state["v"] / (1 - b2 ** (k + 1))
        d = mh / (np.sqrt(vh) + ADAM_FUZZ)
        return xa + cfg.lr * (np.sign(d) if sign else d)

    name = "ftda-linf" if sign else "ftda"
    x4, best, obj = _ascent(name, codec, x, obj, cfg, step, grad_mode="soft")
    return _finish(name, x4, best, obj, cfg)


def ftda_linf(codec, x, obj="FTDA_L2", cfg=None):
    return ftda(codec, x, obj, cfg, sign=True)


def proxy_distance(proxy, delta):
    """Differentiable budget proxy of a perturbation tensor (compared against epsilon)."""
    n = delta.data.size
    if proxy == "L2":
        return gc.scale(gc.l2norm(delta), 1.0 / math.sqrt(n))
    if proxy == "Linf":
        # mean-normalised log-sum-exp: 0 at delta = 0, equals c when |delta| == c everywhere
        a = gc.scale(gc.tabs(delta), LSE_TEMPERATURE)
        shift = float(a.data.max())
        lse = gc.add(gc.log(gc.mean(gc.exp(gc.sub(a, shift)))), shift)
        return gc.scale(lse, 1.0 / LSE_TEMPERATURE)
    raise ValueError(f"unknown proxy {proxy!r}")


def madc_direction(g, h):
    """Component of ``g`` orthogonal to ``h``; ``g`` itself when ``h`` vanishes."""
    hh = float(np.vdot(h, h))
    if hh == 0.0:
        return g
    return g - (float(np.vdot(g, h)) / hh) * h


def madc(codec, x, obj, cfg, proxy="Linf"):
    """Ascent that holds the proxy distance at its budget by projecting out its gradient."""
    if proxy not in ("L2", "Linf", "Mixed"):
        raise ValueError(f"unknown proxy {proxy!r}; expected L2, Linf or Mixed")
    name = f"madc-{proxy.lower()}"
    x4 = _as4(x)
    active_steps = []

    def step(g, xa, k, rng):
        p = proxy if proxy != "Mixed" else ("L2" if k % 2 == 0 else "Linf")
        d_t = Tensor(xa - x4, requires_grad=True)
        rho = proxy_distance(p, d_t)
        d = g
        if rho.item() >= cfg.epsilon * (1 - 1e-3):
            h = gc.backward(rho).get(d_t)
            if h is not None and np.any(h):
                d = madc_direction(g, h)
                active_steps.append(k)
        if p == "Linf":
            return xa + cfg.lr * np.sign(d)
        peak = np.max(np.abs(d))
        return xa if peak == 0 else xa + cfg.lr * d / peak

    x4, best, obj = _ascent(name, codec, x4, obj, cfg, step)
    return _finish(name, x4, best, obj, cfg, extras={"projected_steps": active_steps})


def haar2d(a):
    """Single-level orthonormal Haar transform over the last two (even) axes."""
    p, q = a[..., 0::2, 0::2], a[..., 0::2, 1::2]
    r, s = a[..., 1::2, 0::2], a[..., 1::2, 1::2]
    ll = (p + q + r + s) / 2
    lh = (p - q + r - s) / 2
    hl = (p + q - r - s) / 2
    hh = (p - q - r + s) / 2
    return ll, lh, hl, hh


def ihaar2d(ll, lh, hl, hh):
    h, w = ll.shape[-2:]
    out = np.empty(ll.shape[:-2] + (2 * h, 2 * w))
    out[..., 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[..., 0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[..., 1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[..., 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def highpass(d):
    """Zero the LL subband. Odd trailing rows/columns receive no update."""
    h, w = d.shape[-2:]
    he, we = h - h % 2, w - w % 2
    out = np.zeros_like(d)
    if he and we:
        ll, lh, hl, hh = haar2d(d[..., :he, :we])
        out[..., :he, :we] = ihaar2d(np.zeros_like(ll), lh, hl, hh)
    return out


def ssah(codec, x, obj, cfg):
    """Signed-gradient ascent restricted to the Haar high-frequency subbands.

    The accumulated perturbation is rescaled (not clipped) into the ball so it
    keeps a zero LL band; only the final [0, 1] clamp can reintroduce low
    frequencies. ``extras["delta"]`` holds the unclamped best perturbation.
    """
    x4 = _as4(x)
    state = {"acc": np.zeros_like(x4)}
    accs = [state["acc"]]

    def step(g, xa, k, rng):
        acc = state["acc"] + highpass(cfg.lr * np.sign(g))
        peak = np.max(np.abs(acc))
        if peak > cfg.epsilon:
            acc *= cfg.epsilon / peak
        state["acc"] = acc
        accs.append(acc)
        return np.clip(x4 + acc, 0.0, 1.0)

    x4, best, obj = _ascent("ssah", codec, x4, obj, cfg, step)
    delta = accs[best.index]
    return _finish("ssah", x4, best, obj, cfg, extras={"delta": _as_image(delta)})


def gaussian_noise_baseline(x, sigma=GAUSSIAN_SIGMA, seed=0, epsilon=None, cfg=None):
    """Non-adversarial control: additive Gaussian noise, clipped to the ball when ``epsilon`` is set."""
    x4 = _as4(x)
    if cfg is None:
        cfg = AttackConfig(epsilon=np.inf if epsilon is None else epsilon, steps=0, lr=0.0, seed=seed,
                           preset="gaussian")
    eps = cfg.epsilon if epsilon is None else epsilon
    rng = np.random.default_rng([int(seed), zlib.crc32(b"gaussian")])
    noise = rng.normal(0.0, sigma, x4.shape) if sigma > 0 else np.zeros_like(x4)
    xa = project(x4 + noise, x4, eps)
    best = _Best(xa)
    best.x = xa
    return _finish("gaussian", x4, best, None, cfg, extras={"noise": _as_image(noise), "sigma": sigma})


# ---------------------------------------------------------------------------
# query-based attacks


class _Oracle:
    """Hard-mode objective with query accounting."""

    def __init__(self, obj, x4, codec, budget):
        self.obj, self.x4, self.codec, self.budget = obj, x4, codec, budget
        self.used = 0
        self.clean = None
        if not callable(obj) or isinstance(obj, Objective):
            self.obj = Objective.parse(obj)
            if self.obj.kind in _NEEDS_CLEAN:
                self.clean = clean_reconstruction(codec, x4, "hard")

    def __call__(self, xa):
        if self.used >= self.budget:
            raise AttackError("query budget exhausted")
        self.used += 1
        return objective_value(self.obj, self.x4, Tensor(xa), self.codec, "hard", self.clean).item()


def nes_gradient(f, xa, m, sigma, rng):
    """Antithetic Gaussian estimate of grad f at ``xa`` (2m evaluations)."""
    g = np.zeros_like(xa)
    for _ in range(m):
        u = rng.standard_normal(xa.shape)
        g += (f(xa + sigma * u) - f(xa - sigma * u)) * u
    return g / (2 * m * sigma)


def nes(codec, x, obj, cfg, samples_per_step=50, query_budget=10_000, sigma=NES_SIGMA):
    """Sign ascent on NES gradient estimates. Stops at ``cfg.steps`` or the query budget."""
    if query_budget < 2 * samples_per_step:
        raise AttackError(f"query budget {query_budget} < 2 * samples_per_step ({2 * samples_per_step})")
    x4 = _as4(x)
    rng = _rng(cfg, "nes")
    oracle = _Oracle(obj, x4, codec, query_budget)
    xa = x4.copy()
    best = _Best(xa)
    best.see(oracle(xa), xa)
    k = 0
    while k < cfg.steps and oracle.used + 2 * samples_per_step + 1 <= query_budget:
        g = nes_gradient(oracle, xa, samples_per_step, sigma, rng)
        xa = project(xa + cfg.lr * np.sign(g), x4, cfg.epsilon)
        best.see(oracle(xa), xa)
        k += 1
    return _finish("nes", x4, best, oracle.obj, cfg, queries=oracle.used)


SQUARE_HALVING = (0.1, 0.25, 0.5, 0.75)


def square_fraction(p_init, used, budget):
    return p_init / 2 ** sum(used >= f * budget for f in SQUARE_HALVING)


def square_attack(codec, x, obj, cfg, query_budget=10_000, p_init=0.1):
    """Random search over square patches set to +-epsilon; keeps strict improvements."""
    if query_budget <= 0:
        raise AttackError("query budget must be positive")
    x4 = _as4(x)
    _, c, h, w = x4.shape
    eps = cfg.epsilon
    rng = _rng(cfg, "square")
    oracle = _Oracle(obj, x4, codec, query_budget)
    stripes = rng.choice([-eps, eps], size=(1, c, 1, w))
    cur = project(x4 + stripes, x4, eps)
    cur_v = oracle(cur)
    best = _Best(cur)
    best.see(cur_v, cur)
    while oracle.used < query_budget:
        p = square_fraction(p_init, oracle.used, query_budget)
        side = max(1, min(h, w, int(round(p * min(h, w)))))
        top = rng.integers(0, h - side + 1)
        left = rng.integers(0, w - side + 1)
        cand = cur.copy()
        signs = rng.choice([-eps, eps], size=(1, c, 1, 1))
        cand[..., top:top + side, left:left + side] = x4[..., top:top + side, left:left + side] + signs
        cand = project(cand, x4, eps)
        v = oracle(cand)
        if v > cur_v:
            cur, cur_v = cand, v
        best.see(cur_v, cur)
    return _finish("square", x4, best, oracle.obj, cfg, queries=oracle.used)


# ---------------------------------------------------------------------------
# registry

ATTACKS = {
    "ifgsm": ifgsm,
    "pgd": pgd,
    "ftda": ftda,
    "ftda-linf": ftda_linf,
    "madc-l2": lambda c, x, o, cfg: madc(c, x, o, cfg, "L2"),
    "madc-linf": lambda c, x, o, cfg: madc(c, x, o, cfg, "Linf"),
    "madc-mixed": lambda c, x, o, cfg: madc(c, x, o, cfg, "Mixed"),
    "ssah": ssah,
    "gaussian": lambda c, x, o, cfg: gaussian_noise_baseline(x, GAUSSIAN_SIGMA, cfg.seed, cfg=cfg),
    "nes": nes,
    "square": square_attack,
}
QUERY_ATTACKS = ("nes", "square")


def run_attack(name, codec, image, objective, cfg):
    try:
        fn = ATTACKS[name]
    except KeyError:
        raise ValueError(f"unknown attack {name!r}; expected one of {sorted(ATTACKS)}") from None
    return fn(codec, image, objective, cfg)
