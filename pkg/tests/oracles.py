"""Independent reference implementations shared by the unit and acceptance tests."""
import itertools

import numpy as np
from scipy.signal import correlate2d
from scipy.stats import rankdata


def oracle_ms_ssim(a, b, scales=5, window=11, sigma=1.5):
    """MS-SSIM straight from the definition: 2-D Gaussian window, valid region,
    contrast-structure product at scales 1..M-1, full SSIM at scale M, 2x2
    block-mean downsampling, weighted geometric mean with clamping at 0."""
    ya = 0.299 * a[..., 0] + 0.587 * a[..., 1] + 0.114 * a[..., 2]
    yb = 0.299 * b[..., 0] + 0.587 * b[..., 1] + 0.114 * b[..., 2]
    weights = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
    m = scales
    while m > 1 and min(ya.shape) < window * 2 ** (m - 1):
        m -= 1
    weights = weights[:m] / weights[:m].sum()
    r = np.arange(window) - (window - 1) / 2
    g1 = np.exp(-r ** 2 / (2 * sigma ** 2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    result = 1.0
    for j in range(m):
        mu_a = correlate2d(ya, win, mode="valid")
        mu_b = correlate2d(yb, win, mode="valid")
        var_a = correlate2d(ya * ya, win, mode="valid") - mu_a ** 2
        var_b = correlate2d(yb * yb, win, mode="valid") - mu_b ** 2
        cov = correlate2d(ya * yb, win, mode="valid") - mu_a * mu_b
        cs = (2 * cov + c2) / (var_a + var_b + c2)
        lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
        term = np.mean(lum * cs) if j == m - 1 else np.mean(cs)
        result *= max(term, 0.0) ** weights[j]
        if j < m - 1:
            h2, w2 = ya.shape[0] // 2, ya.shape[1] // 2
            ya = np.array([[ya[2 * i:2 * i + 2, 2 * k:2 * k + 2].mean() for k in range(w2)] for i in range(h2)])
            yb = np.array([[yb[2 * i:2 * i + 2, 2 * k:2 * k + 2].mean() for k in range(w2)] for i in range(h2)])
    return result



def brute_force_p(a, b):
    """Enumerate every sign pattern over the non-zero absolute differences."""
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    r = rankdata(np.abs(d))
    w = r[d > 0].sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        hits += np.dot(signs, r) >= w - 1e-9
    return hits / 2 ** len(d)
