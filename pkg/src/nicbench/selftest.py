"""Fast invariant checks runnable from the command line.

Each check returns ``(ok, detail)``; :func:`run` collects them into
:class:`CheckResult` rows. Nothing here writes outside a temporary directory.
"""
from __future__ import annotations

import itertools
import logging
import os
import tempfile
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from nicbench import attacks as A
from nicbench import bench as B
from nicbench import codecs as C
from nicbench import defenses as D
from nicbench import gradcore as gc
from nicbench import quality, stats
from nicbench.images import load_images, to_tensor

log = logging.getLogger(__name__)

TINY_DATASET = "synthetic:mixed,32,n=8,seed=7"
PROBE_DATASET = "synthetic:mixed,16,n=2,seed=8"


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def tiny_codec(seed=0, epochs=3):
    """A few epochs of factorized training; enough to exercise every code path."""
    data = [im for _, im in load_images(TINY_DATASET)]
    return C.train(C.CodecSpec("factorized", lmbda=0.005, seed=seed), data, epochs=epochs, seed=seed).variant


def check_gradients(codec, images):
    worst = 0.0
    for i, (_, im) in enumerate(images):
        x = to_tensor(im)
        rep = gc.finite_diff_check(C.frozen_rd_loss(codec, x), x, step=1e-6, tol=1e-3, directions=3, seed=i)
        worst = max(worst, rep.max_rel)
        if not rep.passed:
            return False, f"image {i}: {rep}"
    return True, f"max relative error {worst:.2e}"


def check_metrics(codec, images):
    a, b = np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.5)
    p = quality.psnr(a, b)
    if abs(p - 6.0206) > 1e-4:
        return False, f"psnr(mse=0.25) = {p}"
    im = images[0][1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", quality.ScaleReductionWarning)
        s = quality.ms_ssim(im, im)
    if s != 1.0:
        return False, f"ms_ssim(x, x) = {s}"
    return True, "psnr hand case and ms_ssim identity"


def check_grid(codec, images):
    cfg = B.RunConfig(dataset=PROBE_DATASET, codecs=[codec, "identity"],
                      attacks=[B.AttackSpec("pgd", steps=2), "gaussian"],
                      objectives=["ReconstructionL2", "BppIncrease"], defenses=["identity", "random_roll"],
                      instrument=False)
    first = B.run_grid(cfg, images)
    if len(first) != B.expected_cells(cfg, len(images)):
        return False, f"{len(first)} records, expected {B.expected_cells(cfg, len(images))}"
    with tempfile.TemporaryDirectory() as tmp:
        paths = [os.path.join(tmp, f"{i}.csv") for i in range(2)]
        B.write_csv(first, paths[0])
        B.write_csv(B.run_grid(cfg, images), paths[1])
        with open(paths[0], "rb") as f0, open(paths[1], "rb") as f1:
            if f0.read() != f1.read():
                return False, "rerun produced a different CSV"
        persisted = B.read_csv(paths[0])
    for r in persisted:
        if r.error:
            return False, f"cell failed: {r.key}: {r.error}"
        if r.linf > r.epsilon + 1e-6:
            return False, f"budget violated: {r.key}"
        for m in B.METRICS:
            d1 = getattr(r, f"{m}_in") - getattr(r, f"{m}_rec")
            d2 = getattr(r, f"{m}_clean") - getattr(r, f"{m}_adv")
            if d1 != getattr(r, f"Delta_{m}") or d2 != getattr(r, f"delta_{m}"):
                return False, f"score identity broken for {m} at {r.key}"
            if r.codec == "identity" and r.defense == "identity" and (d1 != 0 or d2 != 0):
                return False, f"identity codec gave nonzero scores at {r.key}"
    return True, f"{len(first)} cells, rerun identical"


def check_attacks(codec, images):
    x = images[0][1]
    n = 0
    for name in ("ifgsm", "pgd", "ftda", "madc-linf", "ssah", "gaussian", "square"):
        cfg = A.AttackConfig.from_preset("preset-0", seed=1, steps=3)
        kw = {"query_budget": 30} if name == "square" else {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", quality.ScaleReductionWarning)
            adv = A.ATTACKS[name](codec, x, "ReconstructionL2", cfg, **kw)
        adv.check()
        if adv.linf > cfg.epsilon + 1e-6 or adv.x_adv.min() < 0 or adv.x_adv.max() > 1:
            return False, f"{name} left the feasible set"
        n += 1
    return True, f"{n} attacks inside the budget"


def check_defenses(codec, images):
    x = images[0][1]
    for kind in ("flip", "random_roll", "random_color_reorder"):
        for seed in range(5):
            t = D.sample(kind, seed, x.shape)
            if not np.array_equal(D.apply_post(t, D.apply_pre(t, x)), x):
                return False, f"{kind} seed {seed} is not an exact round trip"
    for theta in (0, 90, 180, 270):
        if D.rotation_roundtrip_error(x, theta) != 0.0:
            return False, f"rotation by {theta} is not exact"
    xt = to_tensor(x)
    cands = D.self_ensemble_candidates(codec, xt)
    k, errs = D._pick(cands, xt)
    got = float(np.mean((D.DefendedCodec(codec, "geometric_self_ensemble").forward(xt)[0].data - xt.data) ** 2))
    if got != min(errs):
        return False, f"self-ensemble mse {got} != min candidate {min(errs)}"
    return True, "round trips exact, self-ensemble picks the minimum"


def _enumerate_p(d):
    d = d[d != 0]
    r = rankdata(np.abs(d))
    w = r[d > 0].sum()
    hits = sum(np.dot(s, r) >= w - 1e-9 for s in itertools.product((0, 1), repeat=len(d)))
    return hits / 2 ** len(d)


def check_stats(codec, images):
    if stats.wilcoxon_one_sided([1] * 5, [0] * 5) != 0.03125:
        return False, "(+1)x5 case"
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = np.round(rng.normal(0.2, 1, int(rng.integers(5, 9))), 1)
        if not d.any():
            continue
        if abs(stats.wilcoxon_one_sided(d, np.zeros_like(d), "exact") - _enumerate_p(d)) > 1e-15:
            return False, f"exact path disagrees with enumeration on {d.tolist()}"
    if stats.bonferroni([0.01], 10)[0] != 0.1 or stats.bonferroni([0.5], 10)[0] != 1.0:
        return False, "bonferroni hand cases"
    if abs(stats.spearman([1, 2, 3, 4], [1, 3, 2, 4]) - 0.8) > 1e-15:
        return False, "spearman hand case"
    return True, "wilcoxon, bonferroni and spearman oracles"


CHECKS = {
    "gradients": check_gradients,
    "metrics": check_metrics,
    "attacks": check_attacks,
    "defenses": check_defenses,
    "grid": check_grid,
    "stats": check_stats,
}


def run(codec=None, names=None):
    """Run the named checks (all by default); returns a list of :class:`CheckResult`."""
    codec = tiny_codec() if codec is None else codec
    images = load_images(PROBE_DATASET)
    out = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = CHECKS[name](codec, images)
        except Exception as exc:  # a crashing check is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
        log.info("selftest %s: %s (%s)", name, "ok" if ok else "FAIL", detail)
    return out
