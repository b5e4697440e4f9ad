"""Full-reference quality metrics and the robustness scores built from them.

Images are (H, W, 3) arrays in [0, 1]. MS-SSIM is computed on BT.601 luma and
is also available in differentiable form (:func:`ms_ssim_tensor`) for the
attack objectives.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from nicbench import gradcore as gc
from nicbench.gradcore import Tensor

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
C1 = 0.01 ** 2
C2 = 0.03 ** 2
LUMA = np.array([0.299, 0.587, 0.114])
YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168735892, -0.331264108, 0.5],
    [0.5, -0.418687589, -0.081312411],
])
YCBCR_OFFSET = np.array([0.0, 0.5, 0.5])


class ScaleReductionWarning(UserWarning):
    pass


def _pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{name}: extent mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b, "mse")
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """Peak signal-to-noise ratio for unit peak; 100 dB when the images are equal."""
    m = mse(a, b)
    if m == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / m))


def psnr_from_mse(m):
    return PSNR_CAP if m == 0.0 else min(PSNR_CAP, 10.0 * np.log10(1.0 / m))


def rgb_to_ycbcr(x):
    """Full-range BT.601; works on (H, W, 3) arrays or (N, 3, H, W) tensors."""
    if isinstance(x, Tensor):
        w = YCBCR.reshape(3, 3, 1, 1)
        return gc.add(gc.conv2d(x, w), YCBCR_OFFSET.reshape(1, 3, 1, 1))
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3:
        raise ValueError(f"rgb_to_ycbcr: expected 3 channels, got shape {x.shape}")
    return x @ YCBCR.T + YCBCR_OFFSET


def luma(x):
    """Y channel: (H, W, 3) -> (H, W), or (N, 3, H, W) tensor -> (N, 1, H, W)."""
    if isinstance(x, Tensor):
        return gc.conv2d(x, LUMA.reshape(1, 3, 1, 1))
    x = np.asarray(x, dtype=np.float64)
    return x @ LUMA


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def usable_scales(h, w, scales, window):
    s = scales
    while s > 1 and min(h, w) < window * 2 ** (s - 1):
        s -= 1
    if min(h, w) < window:
        raise ValueError(f"image {h}x{w} smaller than the {window}-tap SSIM window")
    return s


def _blur(t, g):
    k = len(g)
    t = gc.conv2d(t, g.reshape(1, 1, k, 1))
    return gc.conv2d(t, g.reshape(1, 1, 1, k))


def _ssim_terms(x, y, g):
    mu_x, mu_y = _blur(x, g), _blur(y, g)
    mu_xx, mu_yy, mu_xy = gc.square(mu_x), gc.square(mu_y), gc.mul(mu_x, mu_y)
    s_xx = gc.sub(_blur(gc.square(x), g), mu_xx)
    s_yy = gc.sub(_blur(gc.square(y), g), mu_yy)
    s_xy = gc.sub(_blur(gc.mul(x, y), g), mu_xy)
    cs_map = gc.div(gc.add(gc.scale(s_xy, 2.0), C2), gc.add(gc.add(s_xx, s_yy), C2))
    lum_map = gc.div(gc.add(gc.scale(mu_xy, 2.0), C1), gc.add(gc.add(mu_xx, mu_yy), C1))
    return gc.mean(gc.mul(lum_map, cs_map), axis=(1, 2, 3)), gc.mean(cs_map, axis=(1, 2, 3))


def ms_ssim_tensor(a, b, scales=5, window=11, sigma=1.5, weights=MS_SSIM_WEIGHTS):
    """Differentiable MS-SSIM of (N, C, H, W) tensors; RGB inputs are scored on luma.

    Returns a length-N tensor. Negative per-scale terms are clamped to 0 before
    the weighted geometric mean, so the result lies in [0, 1].
    """
    a, b = gc.as_tensor(a), gc.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ms_ssim: extent mismatch {a.shape} vs {b.shape}")
    if a.shape[1] == 3:
        a, b = luma(a), luma(b)
    h, w = a.shape[-2:]
    s = usable_scales(h, w, scales, window)
    if s < scales:
        warnings.warn(f"ms_ssim: {h}x{w} image supports {s} of {scales} scales; "
                      "weights renormalised", ScaleReductionWarning, stacklevel=2)
    wts = np.asarray(weights[:s], dtype=np.float64)
    wts = wts / wts.sum()
    g = gaussian_window(window, sigma)
    out = None
    for j in range(s):
        ssim_j, cs_j = _ssim_terms(a, b, g)
        val = ssim_j if j == s - 1 else cs_j
        term = gc.power(gc.clamp(val, lo=0.0), wts[j])
        out = term if out is None else gc.mul(out, term)
        if j < s - 1:
            a, b = gc.avg_pool2d(a), gc.avg_pool2d(b)
    return out


def ms_ssim(a, b, scales=5, window=11, sigma=1.5, weights=MS_SSIM_WEIGHTS):
    """MS-SSIM of two (H, W, 3) images in [0, 1]. ``scales=1`` gives single-scale SSIM."""
    a, b = _pair(a, b, "ms_ssim")
    if a.ndim == 3:
        ta = Tensor(luma(a)[None, None])
        tb = Tensor(luma(b)[None, None])
    else:
        ta, tb = Tensor(a[None, None]), Tensor(b[None, None])
    return float(ms_ssim_tensor(ta, tb, scales, window, sigma, weights).data[0])


METRICS = {"mse": mse, "psnr": psnr, "ms_ssim": ms_ssim}


def metric(name):
    try:
        return METRICS[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; expected one of {sorted(METRICS)}") from None


def _fr(fr):
    return metric(fr) if isinstance(fr, str) else fr


def delta_score(fr, x, x_adv, cx, cx_adv):
    """FR(x, x') - FR(C(x), C(x'))."""
    fr = _fr(fr)
    _pair(x, x_adv, "delta_score")
    _pair(cx, cx_adv, "delta_score")
    _pair(x, cx, "delta_score")
    return fr(x, x_adv) - fr(cx, cx_adv)


def small_delta_score(fr, x, cx, x_adv, cx_adv):
    """FR(x, C(x)) - FR(x', C(x'))."""
    fr = _fr(fr)
    _pair(x, cx, "small_delta_score")
    _pair(x_adv, cx_adv, "small_delta_score")
    _pair(x, x_adv, "small_delta_score")
    return fr(x, cx) - fr(x_adv, cx_adv)


def delta_bpp(bpp_clean, bpp_adv):
    return bpp_adv - bpp_clean


@dataclass
class QualityReport:
    """Metric values for the four image pairs of one attacked sample.

    Pair suffixes: ``in`` = (x, x'), ``rec`` = (C(x), C(x')),
    ``clean`` = (x, C(x)), ``adv`` = (x', C(x')).
    """

    values: dict
    bpp_clean: float
    bpp_adv: float

    @property
    def delta_bpp(self):
        return delta_bpp(self.bpp_clean, self.bpp_adv)

    def Delta(self, m):
        return self.values[f"{m}_in"] - self.values[f"{m}_rec"]

    def delta(self, m):
        return self.values[f"{m}_clean"] - self.values[f"{m}_adv"]


PAIRS = ("in", "rec", "clean", "adv")


def quality_report(x, x_adv, cx, cx_adv, bpp_clean, bpp_adv, metrics=("mse", "psnr", "ms_ssim")):
    pairs = {"in": (x, x_adv), "rec": (cx, cx_adv), "clean": (x, cx), "adv": (x_adv, cx_adv)}
    values = {}
    for m in sorted(metrics, key=lambda m: m != "mse"):
        f = metric(m)
        for tag, (p, q) in pairs.items():
            if m == "psnr" and "mse" in metrics:
                values[f"psnr_{tag}"] = psnr_from_mse(values[f"mse_{tag}"])
            else:
                values[f"{m}_{tag}"] = f(p, q)
    return QualityReport(values, bpp_clean, bpp_adv)
