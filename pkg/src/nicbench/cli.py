"""Command-line entry point: ``nicbench <stage> [options]``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 selftest failure. Failures also print one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
import warnings

import numpy as np

from nicbench import __version__
from nicbench import bench as B
from nicbench import codecs as C
from nicbench import config as cfgmod
from nicbench import quality, selftest
from nicbench.images import load_images, save_png

log = logging.getLogger("nicbench")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3
STAGES = ("train", "attack", "eval", "transfer", "report", "selftest")

# the tiny preset trains in seconds; used by selftest and smoke runs
TINY_TRAIN = {"dataset": "synthetic:mixed,32,n=8,seed=100", "epochs": 4, "lambdas": [0.005]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _error_line(stage, kind, message, path=None):
    rec = {"stage": stage, "error": kind, "message": message}
    if path:
        rec["path"] = path
    return json.dumps(rec, sort_keys=True)


def build_parser():
    p = _Parser(prog="nicbench", description="Adversarial robustness benchmark for learned image codecs.",
                formatter_class=argparse.RawDescriptionHelpFormatter,
                epilog="environment: NRB_OUTPUT_DIR, NRB_WORKERS (flags take precedence)")
    p.add_argument("--version", action="version", version=f"nicbench {__version__}")
    sub = p.add_subparsers(dest="stage", metavar="STAGE")
    helps = {
        "train": "train codec variants; writes models/*.nrbc and loss curves",
        "attack": "craft adversarial examples; writes PNG, raw .npy sidecars and traces",
        "eval": "run the evaluation grid; writes results.csv and results.jsonl",
        "transfer": "evaluate every source codec's examples on every target",
        "report": "summarize an existing results.csv into markdown and data files",
        "selftest": "run the built-in invariant checks",
    }
    schema = cfgmod.describe_schema()
    for name in STAGES:
        sp = sub.add_parser(name, help=helps[name], description=helps[name], epilog=schema,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.add_argument("-c", "--config", help="YAML run configuration")
        sp.add_argument("-o", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (dotted key path); repeatable")
        sp.add_argument("--output-dir", help="output directory (beats NRB_OUTPUT_DIR and the config)")
        sp.add_argument("--workers", type=int, help="worker processes (beats NRB_WORKERS and the config)")
        sp.add_argument("--seed", type=int, help="global seed")
        sp.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug")
        if name == "train":
            sp.add_argument("--preset", choices=["tiny"], help="small training preset for smoke runs")
        if name == "report":
            sp.add_argument("--results", help="results CSV (default OUTPUT_DIR/results.csv)")
        if name == "selftest":
            sp.add_argument("--codec", help="codec parameter file to test (default: train a tiny one)")
    return p


def _load(args, stage):
    doc = cfgmod.load_config(args.config, args.overrides)
    if args.output_dir is not None:
        doc["output_dir"] = args.output_dir
    if args.workers is not None:
        if args.workers < 1:
            raise cfgmod.ConfigError("workers", "must be >= 1")
        doc["workers"] = args.workers
    if args.seed is not None:
        doc["seed"] = args.seed
    return doc


# ---------------------------------------------------------------------------
# stages


def cmd_train(args, doc):
    tr = dict(doc["train"])
    if args.preset == "tiny":
        tr.update(TINY_TRAIN)
    if args.seed is not None:
        tr["seed"] = args.seed
    images = [im for _, im in load_images(tr["dataset"])]
    out = os.path.join(doc["output_dir"], "models")
    os.makedirs(out, exist_ok=True)
    written = []
    for fam in tr["families"]:
        for lmbda in tr["lambdas"]:
            spec = C.CodecSpec(fam, lmbda=lmbda, seed=tr["seed"], latent_channels=tr["latent_channels"],
                               hidden_channels=tr["hidden_channels"], downsample_factor=tr["downsample_factor"])
            t0 = time.perf_counter()
            res = C.train(spec, images, epochs=tr["epochs"], batch=tr["batch"], lr=tr["lr"], seed=tr["seed"],
                          crop=tr["crop"], log_every=10 if args.verbose else 0)
            path = os.path.join(out, f"{spec.tag}.nrbc")
            C.save_params(res.variant, path)
            with open(os.path.join(out, f"{spec.tag}.loss.csv"), "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["epoch", "loss"])
                w.writerows((i + 1, repr(v)) for i, v in enumerate(res.loss_curve))
            log.info("trained %s in %.1fs: loss %.5f -> %.5f", spec.tag, time.perf_counter() - t0,
                     res.initial_loss, res.final_loss)
            written.append(path)
    print("\n".join(written))
    return EXIT_OK


def cmd_attack(args, doc):
    rc = cfgmod.to_run_config(doc)
    images = load_images(rc.dataset)
    out = os.path.join(rc.output_dir, "adversarial")
    os.makedirs(out, exist_ok=True)
    codecs = [B.load_codec(c) for c in rc.codecs]
    n = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", quality.ScaleReductionWarning)
        for image_id, x in images:
            for codec in codecs:
                src = B.codec_key(codec)
                for atk in rc.attacks:
                    for obj in rc.objectives:
                        seed = B.cell_seed(rc.seed, "attack", image_id, src, atk.name, atk.preset, obj)
                        adv = atk.run(codec, x, obj, seed).check()
                        stem = os.path.join(out, f"{image_id}__{src}__{atk.name}-{atk.preset}__{obj}")
                        save_png(stem + ".png", adv.x_adv)
                        np.save(stem + ".npy", adv.x_adv.astype(np.float32))
                        with open(stem + ".trace.json", "w") as fh:
                            json.dump({"image": image_id, "codec": src, "attack": atk.name, "preset": atk.preset,
                                       "objective": obj, "seed": seed, "epsilon": adv.config.epsilon,
                                       "linf": adv.linf, "queries_used": adv.queries_used,
                                       "trace": [float(v) for v in adv.trace]}, fh, indent=1)
                        n += 1
    log.info("wrote %d adversarial examples to %s", n, out)
    print(out)
    return EXIT_OK


def _grid(doc, stage):
    rc = cfgmod.to_run_config(doc, stage)
    recs = B.run_grid(rc)
    B.save_results(recs, rc.output_dir)
    failed = sum(1 for r in recs if r.error)
    log.info("%d records (%d failed) written to %s", len(recs), failed, rc.output_dir)
    return rc, recs


def cmd_eval(args, doc):
    rc, recs = _grid(doc, "eval")
    print(os.path.join(rc.output_dir, "results.csv"))
    return EXIT_OK


def cmd_transfer(args, doc):
    rc, recs = _grid(doc, "transfer")
    tm = B.transferability(recs, defense="identity" if "identity" in rc.defenses else rc.defenses[0])
    path = os.path.join(rc.output_dir, "transfer.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "target", "mean_Delta_psnr"])
        for i, s in enumerate(tm.sources):
            for j, t in enumerate(tm.targets):
                v = tm.values[i, j]
                w.writerow([s, t, "" if np.isnan(v) else repr(float(v))])
    with open(os.path.join(rc.output_dir, "transfer_psnr.dat"), "w") as fh:
        fh.write("# rows: source, columns: target; mean Delta_psnr (nan = absent)\n")
        fh.write("source " + " ".join(tm.targets) + "\n")
        for i, s in enumerate(tm.sources):
            fh.write(s + " " + " ".join(f"{v:.6g}" for v in tm.values[i]) + "\n")
    print(path)
    return EXIT_OK


def cmd_report(args, doc):
    path = args.results or os.path.join(doc["output_dir"], "results.csv")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no results file at {path}; run eval first")
    recs = B.read_csv(path)
    written = B.write_report(recs, os.path.dirname(path) if args.results else doc["output_dir"])
    print("\n".join(written))
    return EXIT_OK


def cmd_selftest(args, doc):
    codec = C.load_params(args.codec) if args.codec else None
    t0 = time.perf_counter()
    results = selftest.run(codec)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:<10} {r.seconds:6.2f}s  {r.detail}")
    bad = [r.name for r in results if not r.ok]
    print(f"selftest {'failed: ' + ', '.join(bad) if bad else 'passed'} in {time.perf_counter() - t0:.1f}s")
    if bad:
        print(_error_line("selftest", "SelftestFailure", f"failed checks: {', '.join(bad)}"), file=sys.stderr)
        return EXIT_SELFTEST
    return EXIT_OK


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "eval": cmd_eval, "transfer": cmd_transfer,
            "report": cmd_report, "selftest": cmd_selftest}
# stages that need a config file
_NEEDS_CONFIG = {"attack", "eval", "transfer"}


def main(argv=None):
    parser = build_parser()
    stage = None
    try:
        args = parser.parse_args(argv)
        stage = args.stage
        if stage is None:
            parser.print_help(sys.stderr)
            raise UsageError("a stage is required")
        logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if stage in _NEEDS_CONFIG and not args.config:
            raise UsageError(f"{stage} needs --config")
        doc = _load(args, stage)
    except UsageError as exc:
        print(_error_line(stage, "UsageError", str(exc)), file=sys.stderr)
        return EXIT_USAGE
    except cfgmod.ConfigError as exc:
        print(_error_line(stage, "ConfigError", str(exc), exc.path), file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[stage](args, doc)
    except cfgmod.ConfigError as exc:
        print(_error_line(stage, "ConfigError", str(exc), exc.path), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("stage %s failed", stage, exc_info=True)
        print(_error_line(stage, type(exc).__name__, str(exc).replace("\n", " ")), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
