"""Differentiable spatial resampling built on :func:`gradcore.gather`.

Each helper builds an index map over the (H, W) plane and applies it to every
(N, C) slice. Exact maps (pad, flip, roll, rot90, crop) copy values; rotation by
an arbitrary angle uses bilinear weights.
"""
import numpy as np

from nicbench import gradcore as gc


def _plane_gather(t, idx2d, weights=None):
    n, c, h, w = t.shape
    offs = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
    if weights is None:
        full = offs + idx2d[None, None]
        return gc.gather(t, full)
    full = offs[..., None] + idx2d[None, None]
    wfull = np.broadcast_to(weights[None, None], full.shape)
    return gc.gather(t, full, wfull)


def reflect_pad(t, top, bottom, left, right):
    if not (top or bottom or left or right):
        return t
    h, w = t.shape[-2:]
    grid = np.arange(h * w).reshape(h, w)
    mode = "reflect" if min(h, w) > 1 else "edge"
    idx = np.pad(grid, ((top, bottom), (left, right)), mode=mode)
    return _plane_gather(t, idx)


def crop(t, top, left, h, w):
    return gc.crop(t, top, left, h, w)


def flip(t, axes=(2, 3)):
    h, w = t.shape[-2:]
    grid = np.arange(h * w).reshape(h, w)
    for ax in axes:
        grid = np.flip(grid, axis=ax - 2)
    return _plane_gather(t, np.ascontiguousarray(grid))


def roll(t, shift, axis):
    h, w = t.shape[-2:]
    grid = np.roll(np.arange(h * w).reshape(h, w), shift, axis=axis - 2)
    return _plane_gather(t, grid)


def rot90(t, k):
    """Rotate the plane by k * 90 degrees counter-clockwise (np.rot90 convention)."""
    h, w = t.shape[-2:]
    grid = np.rot90(np.arange(h * w).reshape(h, w), k)
    return _plane_gather(t, np.ascontiguousarray(grid))


def transpose_hw(t):
    h, w = t.shape[-2:]
    return _plane_gather(t, np.ascontiguousarray(np.arange(h * w).reshape(h, w).T))


def permute_channels(t, perm):
    n, c, h, w = t.shape
    perm = np.asarray(perm)
    idx = (np.arange(n)[:, None, None, None] * c + perm[None, :, None, None]) * (h * w) \
        + np.arange(h * w).reshape(1, 1, h, w)
    return gc.gather(t, idx)


def _trig(theta_deg):
    """cos/sin with exact values on multiples of 90 degrees."""
    q, r = divmod(float(theta_deg), 90.0)
    if r == 0.0:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(q) % 4]
    t = np.deg2rad(theta_deg)
    return np.cos(t), np.sin(t)


def rotate(t, theta_deg):
    """Rotate about the plane centre by ``theta_deg`` (bilinear, edge clamped).

    Output has the same extents as the input. Positive angles turn the content
    counter-clockwise in (row, col) display orientation.
    """
    h, w = t.shape[-2:]
    cos, sin = _trig(theta_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source location
    sx = cos * dx - sin * dy + cx
    sy = sin * dx + cos * dy + cy
    sy = np.clip(sy, 0, h - 1)
    sx = np.clip(sx, 0, w - 1)
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    fy, fx = sy - y0, sx - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
    wts = np.stack([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=-1)
    if np.all((fy == 0) & (fx == 0)):
        return _plane_gather(t, idx[..., 0])
    return _plane_gather(t, idx, wts)


def circumscribing_pad(h, w):
    """(top, bottom, left, right) padding to the square containing any rotation."""
    d = int(np.ceil(np.hypot(h, w)))
    d += (d - h) % 2
    ph, pw = d - h, d - w
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2
