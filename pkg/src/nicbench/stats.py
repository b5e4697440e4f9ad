"""Paired tests and rank correlation used by the report stage."""
from __future__ import annotations

import math
import warnings

import numpy as np
from scipy import stats as sps

EXACT_MAX_N = 20


def _signed_ranks(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D with equal length, got {a.shape} and {b.shape}")
    if a.size < 5:
        raise ValueError(f"need at least 5 pairs, got {a.size}")
    d = a - b
    d = d[d != 0]
    return d, sps.rankdata(np.abs(d))


def wilcoxon_exact_sf(ranks, w_plus):
    """P(W+ >= w_plus) under the null, counting all 2^n sign patterns.

    Average ranks are multiples of 1/2, so the distribution is built over
    doubled ranks with an integer-indexed count table.
    """
    r2 = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    counts = np.zeros(int(r2.sum()) + 1, dtype=object)
    counts[0] = 1
    top = 0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:top + r + 1] = counts[:top + 1]
        counts = counts + shifted
        top += r
    target = int(round(2 * w_plus))
    return float(sum(counts[target:]) / (2 ** len(r2)))


def wilcoxon_normal_sf(ranks, w_plus):
    n = len(ranks)
    mean = n * (n + 1) / 4
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - np.sum(tie_sizes ** 3 - tie_sizes) / 48
    if var <= 0:
        return 1.0
    z = (w_plus - mean - 0.5) / math.sqrt(var)
    return float(sps.norm.sf(z))


def wilcoxon_one_sided(a, b, method="auto"):
    """One-sided signed-rank p-value for H1: ``a`` tends to exceed ``b``.

    Zero differences are dropped before ranking. ``method`` is ``"exact"``,
    ``"normal"``, or ``"auto"`` (exact up to 20 non-zero pairs).
    """
    d, ranks = _signed_ranks(a, b)
    if d.size == 0:
        warnings.warn("all paired differences are zero; returning p = 1", RuntimeWarning, stacklevel=2)
        return 1.0
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if d.size <= EXACT_MAX_N else "normal"
    if method == "exact":
        return wilcoxon_exact_sf(ranks, w_plus)
    if method == "normal":
        return wilcoxon_normal_sf(ranks, w_plus)
    raise ValueError(f"unknown method {method!r}")


def bonferroni(pvals, m=None):
    p = np.asarray(pvals, dtype=np.float64)
    m = p.size if m is None else m
    if m < 1:
        raise ValueError("m must be >= 1")
    return np.minimum(1.0, p * m)


def spearman(x, y):
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D samples of equal length")
    if x.size < 3:
        raise ValueError(f"spearman needs at least 3 points, got {x.size}")
    rx, ry = sps.rankdata(x) - (x.size + 1) / 2, sps.rankdata(y) - (y.size + 1) / 2
    den = math.sqrt(float(np.dot(rx, rx)) * float(np.dot(ry, ry)))
    if den == 0:
        return float("nan")
    return float(np.dot(rx, ry) / den)
