"""Experiment configuration: YAML file + environment + command-line overrides.

Every training hyperparameter has an explicit key whose default is the
published value, so a desk-scale config shows its deviations as plain diffs.
Precedence (lowest first): defaults, config file, ``CAEPL__*`` environment
variables, ``--set key.path=value`` flags, dedicated CLI flags.
"""
from __future__ import annotations

import copy
import os

import yaml

from .errors import ConfigError
from .training import TrainConfig

ENV_PREFIX = "CAEPL__"

DEFAULTS = {
    "seed": 0,
    "out": "runs",
    "experiment": {
        "variant": "ae4l-fcn",
        "scale": "toy",
        "divisor": 8,
        "num_classes": None,
        "encoder_filters": None,
        "bn_mode": None,
        "init": "he_normal",  # he_normal | encoder_from_checkpoint | name_mapped
        "encoder_checkpoint": None,
        "import_checkpoint": None,
        "name_map": None,
        "vgg16_skip_first": False,
    },
    "dataset": {
        "kind": "synthetic",  # synthetic | directory
        "root": None,
        "train_split": "train",
        "val_split": "val",
        "downscale": 1,
        "num_classes": 5,
        "synthetic": {"size": 64, "num_classes": 5, "shapes_per_image": [2, 4], "noise": 0.03,
                      "n_train": 200, "n_val": 50, "seed": 0, "line_width": 3.0, "void_border": 2},
    },
    # denoising autoencoder pre-training
    "train_ae": {"lr": 1.0e-4, "momentum": 0.9, "nesterov": True, "batch_size": 4, "l2_map": {"*": 1.0e-3},
                 "loss": "bce", "p_corrupt": 0.5, "p_white": 0.5, "corrupt_mode": "element",
                 "monitor": "min val_loss", "max_epochs": 300, "patience": 50, "dtype": "float32",
                 "eval_batch_size": 25, "record_wall_time": False},
    # standalone FCN
    "train_fcn": {"lr": 1.0e-4, "momentum": 0.9, "nesterov": True, "batch_size": 5, "l2_map": {"*": 1.0e-4},
                  "monitor": "max val_acc", "max_epochs": 300, "patience": 50, "dtype": "float32",
                  "eval_batch_size": 25, "record_wall_time": False},
    # pre-processing block + FCN
    "train_caepl": {"lr": 1.0e-4, "momentum": 0.9, "nesterov": True, "batch_size": 5,
                    "l2_map": {"encoder.*": 1.0e-3, "fcn.*": 5.0e-4},
                    "monitor": "max val_acc", "max_epochs": 300, "patience": 50, "dtype": "float32",
                    "eval_batch_size": 25, "record_wall_time": False},
    "compare": {
        "seeds": [0, 1, 2],
        "jobs": 1,
        "runs": [
            {"name": "FCN", "variant": "fcn", "encoder_weights": False},
            {"name": "AE4L-FCN", "variant": "ae4l-fcn", "encoder_weights": True},
            {"name": "AE4L-FCN", "variant": "ae4l-fcn", "encoder_weights": False},
            {"name": "EB4-FCN", "variant": "eb4-fcn", "encoder_weights": False},
        ],
    },
}


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("l2_map", "name_map"):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(cfg, dotted, value):
    keys = dotted.split(".")
    cur = cfg
    for k in keys[:-1]:
        if k not in cur or not isinstance(cur[k], dict):
            cur[k] = {}
        cur = cur[k]
    cur[keys[-1]] = value


def parse_value(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc}") from None


def load_config(path=None, overrides=(), env=None):
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
        unknown = set(user) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
        cfg = deep_merge(cfg, user)
    env = os.environ if env is None else env
    for key in sorted(env):
        if key.startswith(ENV_PREFIX):
            dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
            set_path(cfg, dotted, parse_value(env[key]))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key.path=value")
        k, v = item.split("=", 1)
        set_path(cfg, k.strip(), parse_value(v))
    return cfg


def train_config(cfg, section, seed=None):
    params = dict(cfg[section])
    params["seed"] = cfg["seed"] if seed is None else seed
    try:
        return TrainConfig(**params)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def dump(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)
