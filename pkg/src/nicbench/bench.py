"""Evaluation grid, result files, transfer matrices, RD curves and summaries.

A grid cell is (image, source codec, target codec, attack, objective,
defense). Adversarial examples are crafted on the source codec and
evaluated through ``defense(target)``. Without transfer targets the target
is the source. Every cell draws its randomness from a seed hashed from the
global seed and the cell key, so results do not depend on execution order or
worker count.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
import tracemalloc
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import product

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

from nicbench import attacks as A
from nicbench import codecs as C
from nicbench import quality, stats
from nicbench.defenses import DEFENSE_KINDS, DefendedCodec
from nicbench.images import load_images

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRICS = ("mse", "psnr", "ms_ssim")
PAIRS = quality.PAIRS


class BenchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AttackSpec:
    """An attack name, its preset, and per-attack overrides."""

    name: str
    preset: str = "preset-0"
    epsilon: float | None = None
    steps: int | None = None
    lr: float | None = None
    query_budget: int | None = None
    samples_per_step: int | None = None
    sigma: float | None = None

    def __post_init__(self):
        if self.name not in A.ATTACKS:
            raise BenchError(f"unknown attack {self.name!r}; expected one of {sorted(A.ATTACKS)}")
        if self.preset not in A.PRESETS:
            raise BenchError(f"unknown preset {self.preset!r}; expected one of {sorted(A.PRESETS)}")

    def config(self, seed):
        over = {k: getattr(self, k) for k in ("epsilon", "steps", "lr") if getattr(self, k) is not None}
        return A.AttackConfig.from_preset(self.preset, seed=seed, **over)

    def run(self, codec, image, objective, seed):
        cfg = self.config(seed)
        if self.name == "gaussian":
            sigma = A.GAUSSIAN_SIGMA if self.sigma is None else self.sigma
            return A.gaussian_noise_baseline(image, sigma, seed, cfg=cfg)
        kw = {}
        if self.name in A.QUERY_ATTACKS and self.query_budget is not None:
            kw["query_budget"] = self.query_budget
        if self.name == "nes" and self.samples_per_step is not None:
            kw["samples_per_step"] = self.samples_per_step
        if kw:
            return A.ATTACKS[self.name](codec, image, objective, cfg, **kw)
        return A.run_attack(self.name, codec, image, objective, cfg)


@dataclass
class RunConfig:
    dataset: str
    codecs: list
    attacks: list
    objectives: list = field(default_factory=lambda: ["ReconstructionL2"])
    defenses: list = field(default_factory=lambda: ["identity"])
    metrics: list = field(default_factory=lambda: list(METRICS))
    seed: int = 0
    output_dir: str = "results"
    workers: int = 1
    targets: list | None = None
    adaptive: bool = False
    instrument: bool = True

    def __post_init__(self):
        for name in ("codecs", "attacks", "objectives", "defenses", "metrics"):
            if not getattr(self, name):
                raise BenchError(f"{name} must not be empty")
        self.attacks = [a if isinstance(a, AttackSpec) else AttackSpec(a) for a in self.attacks]
        self.objectives = [A.Objective.parse(o).label for o in self.objectives]
        for d in self.defenses:
            if d not in DEFENSE_KINDS:
                raise BenchError(f"unknown defense {d!r}; expected one of {DEFENSE_KINDS}")
        for m in self.metrics:
            if m not in METRICS:
                raise BenchError(f"unknown metric {m!r}; expected one of {METRICS}")
        if self.workers < 1:
            raise BenchError("workers must be >= 1")
        for ref in list(self.codecs) + list(self.targets or []):
            if isinstance(ref, str) and ref != "identity" and not os.path.isfile(ref):
                raise BenchError(f"codec parameter file not found: {ref}")


def load_codec(ref):
    """A codec from a parameter-file path, ``"identity"``, or an already built codec."""
    if isinstance(ref, str):
        return C.IdentityCodec() if ref == "identity" else C.load_params(ref)
    return ref


def codec_names(codec):
    """(codec family, variant tag) used in records."""
    if isinstance(codec, C.IdentityCodec):
        return "identity", "none"
    return codec.spec.family, f"l{codec.spec.lmbda:g}"


def codec_key(codec):
    fam, var = codec_names(codec)
    return f"{fam}-{var}"


def cell_seed(global_seed, *key):
    blob = json.dumps([int(global_seed), [str(k) for k in key]]).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little") & (2 ** 63 - 1)


# ---------------------------------------------------------------------------
# records


@dataclass
class EvalRecord:
    image: str
    codec: str
    variant: str
    source: str
    attack: str
    preset: str
    objective: str
    defense: str
    epsilon: float
    steps: int
    lr: float
    seed: int
    mse_in: float | None = None
    mse_rec: float | None = None
    mse_clean: float | None = None
    mse_adv: float | None = None
    psnr_in: float | None = None
    psnr_rec: float | None = None
    psnr_clean: float | None = None
    psnr_adv: float | None = None
    ms_ssim_in: float | None = None
    ms_ssim_rec: float | None = None
    ms_ssim_clean: float | None = None
    ms_ssim_adv: float | None = None
    Delta_mse: float | None = None
    Delta_psnr: float | None = None
    Delta_ms_ssim: float | None = None
    delta_mse: float | None = None
    delta_psnr: float | None = None
    delta_ms_ssim: float | None = None
    bpp_clean: float | None = None
    bpp_adv: float | None = None
    delta_bpp: float | None = None
    linf: float | None = None
    adv_min: float | None = None
    adv_max: float | None = None
    compress_time_ms: float | None = None
    attack_time_ms: float | None = None
    peak_mem_kb: float | None = None
    param_count: int | None = None
    queries_used: int | None = None
    adv_repr: str = "float64"
    schema_version: int = SCHEMA_VERSION
    error: str = ""

    @property
    def key(self):
        return (self.image, self.codec, self.variant, self.attack, self.objective, self.defense,
                self.source, self.preset)


FIELDS = [f.name for f in fields(EvalRecord)]
_INT_FIELDS = {"steps", "seed", "param_count", "queries_used", "schema_version"}
_STR_FIELDS = {"image", "codec", "variant", "source", "attack", "preset", "objective", "defense",
               "adv_repr", "error"}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse(name, s):
    if name in _STR_FIELDS:
        return s
    if s == "":
        return None
    return int(s) if name in _INT_FIELDS else float(s)


def write_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in FIELDS])


def read_csv(path):
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != FIELDS:
            raise BenchError(f"{path}: unexpected CSV header (schema version {SCHEMA_VERSION} expected)")
        return [EvalRecord(**{f: _parse(f, v) for f, v in zip(header, row)}) for row in rd]


def write_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), allow_nan=True) + "\n")


def records_frame(records):
    if not records:
        raise BenchError("no records")
    return pd.DataFrame([asdict(r) for r in records], columns=FIELDS)


def fill_scores(rec, values, bpp_clean, bpp_adv, metrics):
    """Store the four-pair metric values and derive the Delta/delta columns from them."""
    values = {k: float(v) for k, v in values.items()}
    for m in metrics:
        for p in PAIRS:
            setattr(rec, f"{m}_{p}", values[f"{m}_{p}"])
        setattr(rec, f"Delta_{m}", values[f"{m}_in"] - values[f"{m}_rec"])
        setattr(rec, f"delta_{m}", values[f"{m}_clean"] - values[f"{m}_adv"])
    bpp_clean, bpp_adv = float(bpp_clean), float(bpp_adv)
    rec.bpp_clean, rec.bpp_adv = bpp_clean, bpp_adv
    rec.delta_bpp = quality.delta_bpp(bpp_clean, bpp_adv)
    return rec


# ---------------------------------------------------------------------------
# grid execution


@dataclass(frozen=True)
class _Job:
    image: str
    source: str
    attack: AttackSpec
    objective: str
    targets: tuple
    defenses: tuple


_STATE = {}


def _init_worker(images, codecs, config):
    _STATE.update(images=images, codecs=codecs, config=config)
    _STATE["limits"] = threadpool_limits(1)


def _peak(fn):
    tracemalloc.start()
    try:
        out = fn()
        return out, tracemalloc.get_traced_memory()[1] / 1024.0
    finally:
        tracemalloc.stop()


def _evaluate(job, adv, attack_ms, target_id, defense, attack_seed):
    cfg = _STATE["config"]
    images, codecs = _STATE["images"], _STATE["codecs"]
    x = images[job.image]
    target = codecs[target_id]
    fam, var = codec_names(target)
    acfg = job.attack.config(attack_seed)
    key = (job.image, fam, var, job.attack.name, job.objective, defense, job.source, job.attack.preset)
    rec = EvalRecord(job.image, fam, var, job.source, job.attack.name, job.attack.preset, job.objective,
                     defense, acfg.epsilon, acfg.steps, acfg.lr, attack_seed,
                     param_count=int(getattr(target, "param_count", 0)))
    if adv is None:
        return rec
    g = DefendedCodec(target, defense, seed=cell_seed(cfg.seed, "defense", *key))
    if cfg.instrument:
        t0 = time.perf_counter()
        (cx, bpp_clean), peak = _peak(lambda: g.compress(x))
        rec.compress_time_ms = (time.perf_counter() - t0) * 1e3
        rec.peak_mem_kb = peak
        rec.attack_time_ms = attack_ms
    else:
        cx, bpp_clean = g.compress(x)
    cxa, bpp_adv = g.compress(adv.x_adv)
    qr = quality.quality_report(x, adv.x_adv, cx, cxa, bpp_clean, bpp_adv, cfg.metrics)
    fill_scores(rec, qr.values, bpp_clean, bpp_adv, cfg.metrics)
    rec.linf = adv.linf
    rec.adv_min, rec.adv_max = float(adv.x_adv.min()), float(adv.x_adv.max())
    rec.queries_used = adv.queries_used
    return rec


def _run_job(job):
    # small images legitimately run MS-SSIM at fewer scales
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", quality.ScaleReductionWarning)
        return _run_job_inner(job)


def _run_job_inner(job):
    cfg = _STATE["config"]
    codecs, images = _STATE["codecs"], _STATE["images"]
    out = []
    attack_key = (job.image, job.source, job.attack.name, job.attack.preset, job.objective)
    seed = cell_seed(cfg.seed, "attack", *attack_key)

    def craft(victim):
        t0 = time.perf_counter()
        adv = job.attack.run(victim, images[job.image], job.objective, seed).check()
        return adv, (time.perf_counter() - t0) * 1e3

    def failed(target_id, defense, exc):
        rec = _evaluate(job, None, None, target_id, defense, seed)
        rec.error = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        return rec

    try:
        shared = None if cfg.adaptive else craft(codecs[job.source])
    except Exception as exc:  # a failed attack is recorded per cell, never dropped
        log.warning("attack failed for %s: %s", attack_key, exc)
        return [failed(t, d, exc) for t in job.targets for d in job.defenses]
    for target_id in job.targets:
        for defense in job.defenses:
            try:
                if cfg.adaptive:
                    victim = DefendedCodec(codecs[job.source], defense,
                                           seed=cell_seed(cfg.seed, "craft", *attack_key, defense))
                    adv, ms = craft(victim)
                else:
                    adv, ms = shared
                out.append(_evaluate(job, adv, ms, target_id, defense, seed))
            except Exception as exc:
                log.warning("cell failed for %s/%s/%s: %s", attack_key, target_id, defense, exc)
                out.append(failed(target_id, defense, exc))
    return out


def plan(config, image_ids, codec_ids, target_ids):
    jobs = []
    for img, src, atk, obj in product(image_ids, codec_ids, config.attacks, config.objectives):
        targets = tuple(target_ids) if target_ids else (src,)
        jobs.append(_Job(img, src, atk, obj, targets, tuple(config.defenses)))
    return jobs


def run_grid(config, images=None, codecs=None, targets=None):
    """Evaluate every cell of ``config``; returns records in canonical order.

    ``images`` (list of (id, image)) and ``codecs``/``targets`` (lists of codec
    objects) may be passed pre-loaded; otherwise they come from the config.
    """
    if images is None:
        images = load_images(config.dataset)
    codec_objs = [load_codec(c) for c in (codecs or config.codecs)]
    target_objs = [load_codec(c) for c in (targets or config.targets or [])]
    table = {}
    for c in codec_objs + target_objs:
        table.setdefault(codec_key(c), c)
    image_table = dict(images)
    if len(image_table) != len(images):
        raise BenchError("duplicate image ids")
    jobs = plan(config, list(image_table), [codec_key(c) for c in codec_objs],
                [codec_key(c) for c in target_objs])
    log.info("grid: %d attack jobs, %d workers", len(jobs), config.workers)
    records = []
    if config.workers == 1:
        _init_worker(image_table, table, config)
        try:
            for job in jobs:
                records.extend(_run_job(job))
        finally:
            _STATE["limits"].restore_original_limits()
            _STATE.clear()
    else:
        with ProcessPoolExecutor(config.workers, initializer=_init_worker,
                                 initargs=(image_table, table, config)) as pool:
            for recs in pool.map(_run_job, jobs, chunksize=1):
                records.extend(recs)
    records.sort(key=lambda r: r.key)
    return records


def expected_cells(config, n_images):
    n_targets = len(config.targets) if config.targets else 1
    return (n_images * len(config.codecs) * n_targets * len(config.attacks) * len(config.objectives)
            * len(config.defenses))


def save_results(records, output_dir):
    os.makedirs(output_dir, exist_ok=True)
    write_csv(records, os.path.join(output_dir, "results.csv"))
    write_jsonl(records, os.path.join(output_dir, "results.jsonl"))


# ---------------------------------------------------------------------------
# analysis


def _ok(records):
    return [r for r in records if not r.error]


@dataclass
class RDPoint:
    bpp: float
    quality: float
    attacked: bool
    variant: str


def rd_curve(records, metric="psnr", attack=None, objective=None, defense="identity"):
    """Per codec family: (clean curve, attacked curve), each a list of points sorted by bpp."""
    sel = [r for r in _ok(records)
           if (attack is None or r.attack == attack) and (objective is None or r.objective == objective)
           and (defense is None or r.defense == defense) and r.source == f"{r.codec}-{r.variant}"]
    curves = {}
    groups = {}
    for r in sel:
        groups.setdefault((r.codec, r.variant), []).append(r)
    for (fam, var), rs in groups.items():
        clean = RDPoint(float(np.mean([r.bpp_clean for r in rs])),
                        float(np.mean([getattr(r, f"{metric}_clean") for r in rs])), False, var)
        adv = RDPoint(float(np.mean([r.bpp_adv for r in rs])),
                      float(np.mean([getattr(r, f"{metric}_adv") for r in rs])), True, var)
        cl, at = curves.setdefault(fam, ([], []))
        cl.append(clean)
        at.append(adv)
    for cl, at in curves.values():
        cl.sort(key=lambda p: p.bpp)
        at.sort(key=lambda p: p.bpp)
    return curves


@dataclass
class TransferMatrix:
    sources: list
    targets: list
    values: np.ndarray  # NaN marks a missing (absent) pair

    def get(self, source, target):
        return self.values[self.sources.index(source), self.targets.index(target)]


def transferability(records, metric="psnr", attack=None, objective=None, defense="identity"):
    """Mean Delta_<metric> of source-crafted examples measured on each target."""
    sel = [r for r in _ok(records)
           if (attack is None or r.attack == attack) and (objective is None or r.objective == objective)
           and (defense is None or r.defense == defense)]
    sums = {}
    for r in sel:
        sums.setdefault((r.source, f"{r.codec}-{r.variant}"), []).append(getattr(r, f"Delta_{metric}"))
    sources = sorted({s for s, _ in sums})
    targets = sorted({t for _, t in sums})
    vals = np.full((len(sources), len(targets)), np.nan)
    for (s, t), v in sums.items():
        vals[sources.index(s), targets.index(t)] = float(np.mean(v))
    return TransferMatrix(sources, targets, vals)


SCORE_COLUMNS = [f"{k}_{m}" for k in ("Delta", "delta") for m in METRICS] + ["delta_bpp"]


def summarize(records):
    """Aggregate tables as a dict of DataFrames plus correlation summaries."""
    ok = _ok(records)
    if not ok:
        raise BenchError("summarize: no successful records")
    df = records_frame(ok)
    cols = [c for c in SCORE_COLUMNS if df[c].notna().any()]
    out = {}
    for name, keys in {
        "by_codec_attack": ["codec", "variant", "attack"],
        "by_codec_objective": ["codec", "variant", "objective"],
        "by_codec_defense": ["codec", "variant", "defense"],
        "by_attack": ["attack"],
        "by_variant": ["codec", "variant"],
    }.items():
        g = df.groupby(keys, sort=True)[cols]
        table = g.agg(["mean", "median"])
        table.columns = [f"{c}_{s}" for c, s in table.columns]
        table["n"] = g.size()
        out[name] = table.reset_index()
    corr = {}
    by_var = df.groupby(["codec", "variant"]).agg(param_count=("param_count", "first"),
                                                  effect=("delta_psnr", "mean"))
    if len(by_var) >= 3 and by_var["effect"].notna().all():
        corr["params_vs_delta_psnr"] = stats.spearman(by_var["param_count"], by_var["effect"])
    for m in ("psnr", "ms_ssim"):
        a, b = df[f"delta_{m}"], df[f"Delta_{m}"]
        mask = a.notna() & b.notna()
        if mask.sum() >= 3:
            corr[f"delta_vs_Delta_{m}"] = stats.spearman(a[mask], b[mask])
    out["correlations"] = corr
    return out


def significance(records, metric="psnr", alpha=0.05):
    """One-sided paired test that attacks degrade ``metric`` per (variant, attack, objective, defense).

    Groups with fewer than 5 images are skipped. p-values are Bonferroni-adjusted
    over the groups tested.
    """
    df = records_frame(_ok(records))
    keys = ["codec", "variant", "attack", "objective", "defense"]
    rows = []
    for key, g in df.groupby(keys, sort=True):
        a, b = g[f"{metric}_clean"].to_numpy(float), g[f"{metric}_adv"].to_numpy(float)
        if len(g) < 5 or np.isnan(a).any() or np.isnan(b).any():
            continue
        if metric == "mse":
            a, b = b, a
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            p = stats.wilcoxon_one_sided(a, b)
        rows.append((*key, len(g), p))
    out = pd.DataFrame(rows, columns=keys + ["n", "p"])
    out["p_bonferroni"] = stats.bonferroni(out["p"].to_numpy()) if rows else []
    out["significant"] = out["p_bonferroni"] < alpha
    return out


def _fmt_table(df):
    cols = list(df.columns)
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for row in df.itertuples(index=False):
        cells = [f"{v:.4g}" if isinstance(v, float) else str(v) for v in row]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def write_report(records, output_dir, metrics=("psnr", "ms_ssim")):
    """Markdown summary plus whitespace-separated RD and transfer data files."""
    os.makedirs(output_dir, exist_ok=True)
    summary = summarize(records)
    parts = ["# Robustness summary", ""]
    n_err = sum(1 for r in records if r.error)
    parts.append(f"{len(records)} cells, {n_err} failed.\n")
    for name, table in summary.items():
        if name == "correlations":
            continue
        parts += [f"## {name}", "", _fmt_table(table), ""]
    parts += ["## correlations", ""]
    for k, v in summary["correlations"].items():
        parts.append(f"- {k}: {v:.4f}")
    sig = significance(records)
    if len(sig):
        parts += ["", "## paired test (psnr, clean > attacked)", "", _fmt_table(sig)]
    written = []
    for m in metrics:
        for attack in sorted({r.attack for r in _ok(records)}):
            curves = rd_curve(records, m, attack=attack)
            if not curves:
                continue
            path = os.path.join(output_dir, f"rd_{m}_{attack}.dat")
            with open(path, "w") as fh:
                fh.write("# family variant bpp_clean quality_clean bpp_adv quality_adv\n")
                for fam, (cl, at) in sorted(curves.items()):
                    adv = {p.variant: p for p in at}
                    for pc in cl:
                        pa = adv[pc.variant]
                        fh.write(f"{fam} {pc.variant} {pc.bpp:.6g} {pc.quality:.6g} {pa.bpp:.6g} {pa.quality:.6g}\n")
                    fh.write("\n\n")
            written.append(path)
    tm = transferability(records)
    if any(s != t for s in tm.sources for t in tm.targets if not math.isnan(tm.get(s, t))):
        path = os.path.join(output_dir, "transfer_psnr.dat")
        with open(path, "w") as fh:
            fh.write("# rows: source, columns: target; mean Delta_psnr (nan = absent)\n")
            fh.write("source " + " ".join(tm.targets) + "\n")
            for i, s in enumerate(tm.sources):
                fh.write(s + " " + " ".join(f"{v:.6g}" for v in tm.values[i]) + "\n")
        written.append(path)
        parts += ["", "## transfer (mean Delta_psnr)", "",
                  _fmt_table(pd.DataFrame(tm.values, index=tm.sources, columns=tm.targets).reset_index())]
    md = os.path.join(output_dir, "report.md")
    with open(md, "w") as fh:
        fh.write("\n".join(parts) + "\n")
    return [md] + written
