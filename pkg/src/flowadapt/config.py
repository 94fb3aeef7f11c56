"""Run configuration: one nested key-value document covering every stage.

Defaults below are the resolved desk-scale values; a JSON config file and
``section.key=value`` command-line overrides layer on top. Unknown keys and
type mismatches are rejected with every offending key reported at once.
"""

import copy
import hashlib
import json

from .data import CORRUPTION_KINDS
from .errors import ConfigError

DEFAULTS = {
    "data": {
        "num_classes": 10,
        "input_dim": 20,
        "n_train": 10000,
        "n_test": 2000,
        "seed": 0,
        "mean_distance": 4.0,
    },
    "backbone": {
        "widths": [32, 16, 16],
        "split_stage": 2,
        "bn_momentum": 0.1,
        "bn_eps": 1e-5,
        "seed": 0,
    },
    "flow": {
        "num_layers": 3,
        "hidden": 64,
        "scale_clamp": 2.0,
        "mask_type": "checkerboard",
        "seed": 0,
    },
    "train_source": {
        "epochs": 50,
        "batch_size": 128,
        "lr0": 0.1,
        "schedule": "step",
        "milestones": [25, 40],
        "factor": 0.1,
        "momentum": 0.9,
        "seed": 0,
    },
    "train_flow": {
        "epochs": 40,
        "batch_size": 128,
        "lr0": 0.05,
        "bn_stats_update": True,
        "seed": 0,
    },
    "train_joint": {
        "epochs": 50,
        "batch_size": 128,
        "lr0": 0.1,
        "schedule": "step",
        "milestones": [25, 40],
        "factor": 0.1,
        "momentum": 0.9,
        "beta": 0.01,
        "flow_lr0": 0.01,
        "seed": 0,
    },
    "adapt": {
        "iterations": 10,
        "lr": 0.001,
        "batch_size": 128,
        "reset_per_batch": True,
        "adapt_scope": None,
        "bn_mode_during_adapt": "train",
    },
    "bench": {
        "corruptions": list(CORRUPTION_KINDS),
        "severities": [1, 3, 5],
        "iterations": [0, 1, 3, 10, 20, 50],
        "seeds": [0, 1, 2, 3, 4],
        "jobs": None,
        "ablation_betas": [0.01, 0.001],
    },
}


def _check_type(key, default, value, problems):
    if default is None or value is None:
        if value is not None and not isinstance(value, int):
            problems.append(f"{key}: expected integer or null, got {value!r}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            problems.append(f"{key}: expected boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{key}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{key}: expected number, got {value!r}")
            return value
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            problems.append(f"{key}: expected string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            problems.append(f"{key}: expected list, got {value!r}")
        return value
    return value


def resolve_config(file_values=None, overrides=None):
    """Defaults, then config-file values, then `section.key=value` overrides.

    Raises ConfigError listing every unknown key and type mismatch.
    """
    cfg = copy.deepcopy(DEFAULTS)
    problems = []
    if file_values:
        if not isinstance(file_values, dict):
            raise ConfigError(["config file must hold a JSON object"])
        for section, entries in file_values.items():
            if section not in cfg:
                problems.append(f"unknown section {section!r}")
                continue
            if not isinstance(entries, dict):
                problems.append(f"section {section!r} must be an object")
                continue
            for key, value in entries.items():
                if key not in cfg[section]:
                    problems.append(f"unknown key {section}.{key}")
                    continue
                cfg[section][key] = _check_type(f"{section}.{key}",
                                                DEFAULTS[section][key], value, problems)
    for item in overrides or []:
        if "=" not in item:
            problems.append(f"override {item!r} is not of the form section.key=value")
            continue
        dotted, _, raw = item.partition("=")
        parts = dotted.split(".")
        if len(parts) != 2:
            problems.append(f"override {item!r} is not of the form section.key=value")
            continue
        section, key = parts
        if section not in cfg or key not in cfg[section]:
            problems.append(f"unknown key {dotted}")
            continue
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg[section][key] = _check_type(dotted, DEFAULTS[section][key], value, problems)
    if problems:
        raise ConfigError(problems)
    _validate_values(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def _validate_values(cfg, problems):
    for kind in cfg["bench"]["corruptions"]:
        if kind not in CORRUPTION_KINDS:
            problems.append(f"bench.corruptions: unknown kind {kind!r}")
    for sev in cfg["bench"]["severities"]:
        if not isinstance(sev, int) or not 1 <= sev <= 5:
            problems.append(f"bench.severities: {sev!r} outside 1..5")
    for it in cfg["bench"]["iterations"]:
        if not isinstance(it, int) or it < 0:
            problems.append(f"bench.iterations: {it!r} must be a non-negative integer")
    if cfg["flow"]["mask_type"] not in ("checkerboard", "channelwise"):
        problems.append(f"flow.mask_type: {cfg['flow']['mask_type']!r} unknown")
    if cfg["backbone"]["split_stage"] not in (1, 2, 3):
        problems.append("backbone.split_stage must be 1, 2 or 3")
    if len(cfg["backbone"]["widths"]) != 3:
        problems.append("backbone.widths must list exactly 3 stage widths")


def load_config_file(path):
    with open(path, "r") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None


def dump_config(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True)


def config_hash(cfg):
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
