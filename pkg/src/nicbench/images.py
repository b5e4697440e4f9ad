"""Image containers, file I/O and seeded synthetic test images.

Images are ``float64`` arrays of shape (H, W, 3) with values in [0, 1].
Tensors fed to the codecs use the (N, 3, H, W) layout.
"""
from __future__ import annotations

import logging
import os
import re
import warnings

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from nicbench.gradcore import Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")
SYNTHETIC_KINDS = ("gradient", "checkerboard", "noise", "mixed")


class ImageLoadError(ValueError):
    pass


def check_image(x, name="image"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"{name}: expected shape (H, W, 3), got {x.shape}")
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise ValueError(f"{name}: empty image")
    return x


def to_tensor(x, requires_grad=False):
    """(H, W, 3) image -> (1, 3, H, W) tensor."""
    x = check_image(x)
    return Tensor(np.ascontiguousarray(x.transpose(2, 0, 1)[None]), requires_grad=requires_grad)


def to_image(t):
    """(1, 3, H, W) tensor or array -> (H, W, 3) array."""
    a = t.data if isinstance(t, Tensor) else np.asarray(t)
    return np.ascontiguousarray(a[0].transpose(1, 2, 0))


def quantize8(x):
    return np.clip(np.round(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, x):
    PILImage.fromarray(quantize8(x), mode="RGB").save(path, format="PNG")


def read_image(path):
    with PILImage.open(path) as im:
        im.load()
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def load_images(source):
    """Load a directory of 8-bit PNG/PPM files, or a ``synthetic:`` spec.

    Returns a list of ``(image_id, image)`` in filename order. Unreadable files
    are skipped with a warning; an empty result raises :class:`ImageLoadError`.
    """
    if isinstance(source, str) and source.startswith("synthetic:"):
        return synthetic_set(source)
    if not os.path.isdir(source):
        raise ImageLoadError(f"dataset directory not found: {source}")
    out = []
    for name in sorted(os.listdir(source)):
        path = os.path.join(source, name)
        if not os.path.isfile(path):
            continue
        if not name.lower().endswith(IMAGE_SUFFIXES):
            warnings.warn(f"skipping non-image file {name}", stacklevel=2)
            continue
        try:
            out.append((os.path.splitext(name)[0], read_image(path)))
        except Exception as exc:  # PIL raises a zoo of types for bad files
            warnings.warn(f"skipping unreadable image {name}: {exc}", stacklevel=2)
    if not out:
        raise ImageLoadError(f"no readable images in {source}")
    return out


_SPEC_RE = re.compile(r"^synthetic:(?P<kind>[a-z]+),(?P<size>\d+)(?P<opts>(,[a-z]+=\d+)*)$")


def parse_synthetic(spec):
    m = _SPEC_RE.match(spec.replace(" ", ""))
    if not m or m.group("kind") not in SYNTHETIC_KINDS:
        raise ImageLoadError(
            f"bad synthetic source {spec!r}; expected synthetic:<{'|'.join(SYNTHETIC_KINDS)}>,<size>[,n=N][,seed=S]"
        )
    opts = dict(kv.split("=") for kv in m.group("opts").split(",") if kv)
    unknown = set(opts) - {"n", "seed"}
    if unknown:
        raise ImageLoadError(f"unknown synthetic option(s) {sorted(unknown)} in {spec!r}")
    size = int(m.group("size"))
    if size < 8:
        raise ImageLoadError("synthetic images must be at least 8 px")
    return m.group("kind"), size, int(opts.get("n", 1)), int(opts.get("seed", 0))


def synthetic_set(spec):
    kind, size, n, seed = parse_synthetic(spec)
    kinds = ("gradient", "checkerboard", "noise", "blend")
    out = []
    for i in range(n):
        k = kinds[i % len(kinds)] if kind == "mixed" else kind
        rng = np.random.default_rng([seed, i])
        out.append((f"{kind}-{seed}-{i:04d}", synthetic_image(k, size, rng)))
    return out


def synthetic_image(kind, size, rng):
    if kind == "gradient":
        img = _gradient(size, rng)
    elif kind == "checkerboard":
        img = _checkerboard(size, rng)
    elif kind == "noise":
        img = _filtered_noise(size, rng)
    elif kind == "blend":
        a = rng.uniform(0.3, 0.7)
        img = a * _gradient(size, rng) + (1 - a) * _filtered_noise(size, rng)
    else:
        raise ImageLoadError(f"unknown synthetic kind {kind!r}")
    return np.clip(img, 0.0, 1.0)


def _gradient(size, rng):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    img = np.empty((size, size, 3))
    for c in range(3):
        ang = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(ang) * xx + np.sin(ang) * yy
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        lo, hi = np.sort(rng.uniform(0.05, 0.95, size=2))
        img[..., c] = lo + (hi - lo) * ramp
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.1, 0.9, size=2) * size
        r = rng.uniform(0.08, 0.3) * size
        d = np.sqrt((yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2)
        blob = 1.0 / (1.0 + np.exp((d - r) / 1.5))
        img = img * (1 - blob[..., None]) + rng.uniform(0, 1, size=3) * blob[..., None]
    return img


def _checkerboard(size, rng):
    cell = int(rng.integers(4, 17))
    yy, xx = np.mgrid[0:size, 0:size]
    board = ((yy // cell + xx // cell) % 2).astype(float)
    c0, c1 = rng.uniform(0.05, 0.95, size=(2, 3))
    img = c0 * (1 - board[..., None]) + c1 * board[..., None]
    return ndimage.gaussian_filter(img, sigma=(0.7, 0.7, 0), mode="reflect")


def _filtered_noise(size, rng):
    sigma = rng.uniform(1.5, 4.0)
    base = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    img = np.empty((size, size, 3))
    for c in range(3):
        own = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
        f = 0.7 * base + 0.3 * own
        f = (f - f.mean()) / (f.std() + 1e-12)
        img[..., c] = rng.uniform(0.3, 0.7) + rng.uniform(0.08, 0.2) * f
    return img
