"""YAML run configuration with a strict schema.

Unknown keys and type mismatches are errors that name the offending key path
(``attacks[1].epsilon``). Defaults filled in are logged at INFO level.
Overrides are ``dotted.key=value`` strings applied after the file is read;
values are parsed as YAML scalars.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import yaml

from nicbench import attacks as A
from nicbench import bench as B
from nicbench import codecs as C

log = logging.getLogger(__name__)

CONFIG_VERSION = B.SCHEMA_VERSION
REQUIRED = object()


class ConfigError(ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class Key:
    type: object
    default: object
    doc: str


ATTACK_KEYS = {
    "name": Key(str, REQUIRED, f"attack id, one of {', '.join(sorted(A.ATTACKS))}"),
    "preset": Key(str, None, f"parameter preset ({', '.join(sorted(A.PRESETS))}); defaults to attack.preset"),
    "epsilon": Key(float, None, "L-inf budget in [0, 1] units; overrides the preset"),
    "steps": Key(int, None, "iterations; overrides the preset"),
    "lr": Key(float, None, "step size; overrides the preset"),
    "query_budget": Key(int, None, "query cap for nes/square"),
    "samples_per_step": Key(int, None, "antithetic pairs per NES step"),
    "sigma": Key(float, None, "noise std for the gaussian control"),
}

SECTIONS = {
    "attack": {
        "preset": Key(str, "preset-0", "default preset for every attack entry"),
        "epsilon": Key(float, None, "default L-inf budget for every attack"),
        "steps": Key(int, None, "default iteration count"),
        "lr": Key(float, None, "default step size"),
    },
    "train": {
        "dataset": Key(str, "synthetic:mixed,64,n=64,seed=100", "training images (directory or synthetic: generator string)"),
        "families": Key([str], list(C.FAMILIES), "codec families to train"),
        "lambdas": Key([float], list(C.DEFAULT_LAMBDAS), "rate weights, one variant per value"),
        "epochs": Key(int, 150, "training epochs"),
        "batch": Key(int, 8, "crops per step"),
        "crop": Key(int, 32, "training crop size"),
        "lr": Key(float, 2e-3, "Adam learning rate"),
        "seed": Key(int, 0, "training seed"),
        "latent_channels": Key(int, 8, "latent channels"),
        "hidden_channels": Key(int, 16, "hidden channels"),
        "downsample_factor": Key(int, 4, "spatial downsampling factor"),
    },
}

TOP = {
    "version": Key(int, CONFIG_VERSION, "config schema version (must match the CSV schema)"),
    "dataset": Key(str, REQUIRED, "evaluation images: a directory of PNG/PPM files or a synthetic: generator string"),
    "codecs": Key([str], REQUIRED, "parameter files of the codec variants under attack, or 'identity'"),
    "targets": Key([str], None, "transfer targets (transfer stage); default all codecs"),
    "attacks": Key(list, REQUIRED, "attack entries: a name, 'name:preset', or a mapping (see attack keys)"),
    "objectives": Key([str], ["ReconstructionL2"], f"objectives ({', '.join(A.OBJECTIVE_KINDS)}; suffix (Y) for luma)"),
    "defenses": Key([str], ["identity"], "defenses applied around each target codec"),
    "metrics": Key([str], list(B.METRICS), "full-reference metrics recorded"),
    "seed": Key(int, 0, "global seed; every cell seed is hashed from it"),
    "output_dir": Key(str, "results", "output directory (env NRB_OUTPUT_DIR, flag --output-dir)"),
    "workers": Key(int, 1, "worker processes (env NRB_WORKERS, flag --workers)"),
    "adaptive": Key(bool, False, "craft attacks through the defended codec instead of the bare codec"),
    "instrument": Key(bool, True, "record timing and peak memory (timings make CSVs run-dependent)"),
}


def describe_schema():
    """Plain-text listing of every key, used in ``--help``."""
    lines = ["top-level keys:"]
    for k, key in TOP.items():
        d = "required" if key.default is REQUIRED else f"default {key.default!r}"
        lines.append(f"  {k:<17} {key.doc} ({d})")
    for sec, keys in SECTIONS.items():
        lines.append(f"{sec} section:")
        for k, key in keys.items():
            lines.append(f"  {sec}.{k:<15} {key.doc} (default {key.default!r})")
    lines.append("attack entry keys:")
    for k, key in ATTACK_KEYS.items():
        lines.append(f"  {k:<17} {key.doc}")
    return "\n".join(lines)


def _check_type(path, value, typ):
    if value is None:
        return None
    if isinstance(typ, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_check_type(f"{path}[{i}]", v, typ[0]) for i, v in enumerate(value)]
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return value
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise TypeError(typ)


def _fill(doc, schema, prefix):
    if not isinstance(doc, dict):
        raise ConfigError(prefix, f"expected a mapping, got {type(doc).__name__}")
    out = {}
    for k in doc:
        if k not in schema:
            raise ConfigError(f"{prefix}.{k}" if prefix else str(k), "unknown key")
    for k, key in schema.items():
        path = f"{prefix}.{k}" if prefix else k
        if k in doc:
            out[k] = _check_type(path, doc[k], key.type)
        elif key.default is REQUIRED:
            raise ConfigError(path, "required key missing")
        else:
            out[k] = list(key.default) if isinstance(key.default, list) else key.default
            log.info("config default: %s = %r", path, key.default)
    return out


def _set_dotted(doc, dotted, value):
    parts = dotted.split(".")
    cur = doc
    for i, p in enumerate(parts[:-1]):
        nxt = cur.get(p)
        if nxt is None:
            nxt = cur[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(".".join(parts[:i + 1]), "cannot override inside a non-mapping value")
        cur = nxt
    cur[parts[-1]] = value


def apply_overrides(doc, overrides):
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        k, v = item.split("=", 1)
        _set_dotted(doc, k.strip(), yaml.safe_load(v))
    return doc


def load_config(path, overrides=(), env=None):
    """Read, override and validate a config file into a plain dict with defaults filled."""
    env = os.environ if env is None else env
    if path is None:
        doc = {}
    else:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError("", f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError("", f"malformed YAML in {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("", "config root must be a mapping")
    if "NRB_OUTPUT_DIR" in env:
        doc["output_dir"] = env["NRB_OUTPUT_DIR"]
    if "NRB_WORKERS" in env:
        try:
            doc["workers"] = int(env["NRB_WORKERS"])
        except ValueError:
            raise ConfigError("workers", f"NRB_WORKERS must be an integer, got {env['NRB_WORKERS']!r}") from None
    apply_overrides(doc, overrides)
    unknown = [k for k in doc if k not in TOP and k not in SECTIONS]
    if unknown:
        raise ConfigError(str(unknown[0]), "unknown key")
    out = {sec: _fill(doc.get(sec) or {}, keys, sec) for sec, keys in SECTIONS.items()}
    for k, key in TOP.items():
        if k in doc:
            out[k] = _check_type(k, doc[k], key.type)
        elif key.default is REQUIRED:
            out[k] = REQUIRED
        else:
            out[k] = list(key.default) if isinstance(key.default, list) else key.default
            log.info("config default: %s = %r", k, key.default)
    if out["version"] != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported config version {out['version']} (expected {CONFIG_VERSION})")
    return out


def _attack_entry(i, entry, defaults):
    path = f"attacks[{i}]"
    if isinstance(entry, str):
        name, _, preset = entry.partition(":")
        entry = {"name": name, **({"preset": preset} if preset else {})}
    vals = _fill(entry, ATTACK_KEYS, path)
    for k in ("preset", "epsilon", "steps", "lr"):
        if vals.get(k) is None and defaults.get(k) is not None:
            vals[k] = defaults[k]
    if vals["name"] not in A.ATTACKS:
        raise ConfigError(f"{path}.name", f"unknown attack {vals['name']!r}")
    if vals["preset"] not in A.PRESETS:
        raise ConfigError(f"{path}.preset", f"unknown preset {vals['preset']!r}")
    return B.AttackSpec(**vals)


def _require(doc, *keys):
    for k in keys:
        if doc[k] is REQUIRED:
            raise ConfigError(k, "required key missing")


def to_run_config(doc, stage="eval"):
    """Validated :class:`bench.RunConfig` from a loaded config dict."""
    _require(doc, "dataset", "codecs", "attacks")
    attacks = [_attack_entry(i, a, doc["attack"]) for i, a in enumerate(doc["attacks"])]
    for name in ("codecs", "targets"):
        for i, ref in enumerate(doc[name] or []):
            if ref != "identity" and not os.path.isfile(ref):
                raise ConfigError(f"{name}[{i}]", f"codec parameter file not found: {ref}")
    for i, o in enumerate(doc["objectives"]):
        try:
            A.Objective.parse(o)
        except ValueError as exc:
            raise ConfigError(f"objectives[{i}]", str(exc)) from None
    targets = doc["targets"]
    if stage == "transfer" and not targets:
        targets = list(doc["codecs"])
    if stage != "transfer":
        targets = None
    try:
        return B.RunConfig(
            dataset=doc["dataset"], codecs=list(doc["codecs"]), attacks=attacks,
            objectives=list(doc["objectives"]), defenses=list(doc["defenses"]), metrics=list(doc["metrics"]),
            seed=doc["seed"], output_dir=doc["output_dir"], workers=doc["workers"], targets=targets,
            adaptive=doc["adaptive"], instrument=doc["instrument"],
        )
    except B.BenchError as exc:
        raise ConfigError("", str(exc)) from None


def parse_config(path, overrides=(), env=None, stage="eval"):
    return to_run_config(load_config(path, overrides, env), stage)
