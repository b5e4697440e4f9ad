"""Numpy implementations of the conv gather/scatter kernels.

These are the reference versions; ``_ckernels`` must agree with them bit for bit.
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, stride):
    """Unfold ``x`` of shape (N, C, H, W) into (N, C*kh*kw, Ho*Wo)."""
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    x = np.ascontiguousarray(x)
    sn, sc, sh, sw = x.strides
    view = as_strided(
        x,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, shape, kh, kw, stride):
    """Adjoint of :func:`im2col`: scatter-add columns back into ``shape``."""
    n, c, h, w = shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape, dtype=np.float64)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + hspan:stride, j:j + wspan:stride] += cols[:, :, i, j]
    return out


def scatter_add(size, index, values):
    """out[index[k]] += values[k], summed in k order."""
    return np.bincount(index.ravel(), weights=values.ravel(), minlength=size)
