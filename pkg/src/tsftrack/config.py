"""Run configuration: a two-level YAML file addressed with dotted keys.

Every key has a default; files and ``--set section.key=value`` overrides
may only name keys that exist. Values are coerced to the default's type.
"""
from __future__ import annotations

import copy
from pathlib import Path

import yaml

__all__ = ["ConfigError", "DEFAULTS", "HELP", "load_config", "apply_overrides", "flatten", "reference_markdown"]


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


DEFAULTS = {
    "seed": 0,
    "model": {
        "variant": "tiny",
        "template_size": 127,
        "instance_size": 255,
        "pretrained_weights_path": None,
    },
    "stage1": {
        "epochs": 10,
        "batch_size": 32,
        "warmup_epochs": 2,
        "warmup_lr": 0.001,
        "lr_start": 0.01,
        "lr_end": 0.001,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "reg_weight": 1.0,
        "grad_clip": 10.0,
        "pairs": 500,
        "pair_sequences": 50,
        "max_frame_gap": 10,
        "max_shift": 64.0,
        "scale_jitter": 0.25,
    },
    "stage2": {
        "epochs": 20,
        "batch_size": 16,
        "lr_start": 0.05,
        "lr_end": 0.005,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "grad_clip": 10.0,
        "mu_sequences": 20,
        "data_seed": 4242,
    },
    "track": {
        "variant": "full",
        "window_influence": 0.40,
        "penalty_k": 0.10,
        "size_lr": 0.30,
    },
}

HELP = {
    "seed": "master seed for data generation, shuffling and initialisation",
    "model.variant": "backbone width: tiny (CPU scale) or full (ResNet-50 widths)",
    "model.template_size": "template patch side in pixels",
    "model.instance_size": "search patch side in pixels",
    "model.pretrained_weights_path": "optional ImageNet ResNet state dict loaded into the backbone before stage 1",
    "stage1.epochs": "epochs over the stage-1 pair set",
    "stage1.batch_size": "pairs per SGD step",
    "stage1.warmup_epochs": "linear warm-up epochs from warmup_lr to lr_start",
    "stage1.warmup_lr": "learning rate at the first warm-up epoch",
    "stage1.lr_start": "learning rate after warm-up",
    "stage1.lr_end": "learning rate at the last epoch (log-linear decay)",
    "stage1.momentum": "SGD momentum",
    "stage1.weight_decay": "SGD weight decay",
    "stage1.reg_weight": "weight of the IoU regression term",
    "stage1.grad_clip": "gradient norm clip",
    "stage1.pairs": "number of (template, search) training pairs",
    "stage1.pair_sequences": "synthetic sequences the pairs are cut from",
    "stage1.max_frame_gap": "largest frame distance between template and search frame",
    "stage1.max_shift": "largest target offset from the search patch centre, in patch pixels",
    "stage1.scale_jitter": "log-uniform search scale jitter",
    "stage2.epochs": "epochs over the harvested template tuples",
    "stage2.batch_size": "tuples per SGD step",
    "stage2.lr_start": "first-epoch learning rate",
    "stage2.lr_end": "last-epoch learning rate (log-spaced, no warm-up)",
    "stage2.momentum": "SGD momentum",
    "stage2.weight_decay": "SGD weight decay",
    "stage2.grad_clip": "gradient norm clip",
    "stage2.mu_sequences": "synthetic sequences tracked to harvest template tuples",
    "stage2.data_seed": "seed of the harvest sequences",
    "track.variant": "full, tsf-only, mu-only or baseline",
    "track.window_influence": "weight of the cosine window in the final score",
    "track.penalty_k": "scale/aspect change penalty strength",
    "track.size_lr": "size smoothing factor (scaled by penalised score)",
}


def flatten(cfg: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in cfg.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(key, f"expected true/false, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(key, f"expected an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(key, f"expected a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


def _set(cfg: dict, key: str, value) -> None:
    flat_defaults = flatten(DEFAULTS)
    if key not in flat_defaults:
        raise ConfigError(key, "unknown config key")
    value = _coerce(key, value, flat_defaults[key])
    node = cfg
    *parents, leaf = key.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value


def _merge(cfg: dict, data: dict, prefix: str = "") -> None:
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            if prefix or not isinstance(DEFAULTS.get(k), dict):
                raise ConfigError(key, "unknown config section")
            _merge(cfg, v, key + ".")
        else:
            _set(cfg, key, v)


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``key=value`` strings; values are parsed as YAML scalars."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, raw = item.split("=", 1)
        _set(cfg, key.strip(), yaml.safe_load(raw) if raw.strip() else None)
    return cfg


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(str(path), "config file must hold a mapping")
        _merge(cfg, data)
    return apply_overrides(cfg, overrides)


def reference_markdown() -> str:
    lines = ["| key | default | meaning |", "|---|---|---|"]
    for key, default in flatten(DEFAULTS).items():
        lines.append(f"| `{key}` | `{default}` | {HELP.get(key, '')} |")
    return "\n".join(lines)
