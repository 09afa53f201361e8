"""Experiment configuration: JSON files over a documented default schema.

A config file is a JSON object with any subset of the sections below; values
deep-merge over the defaults. Unknown keys are rejected so typos fail loudly.
The resolved config (defaults + file + CLI overrides) is what gets hashed,
and the hash names the run directory, so artifacts are a pure function of
the resolved config.
"""

from __future__ import annotations

import copy
import json
from typing import Optional

from .util import stable_hash

MODES = ("pppfl", "fedmeta", "fedavg", "local_secret", "local_synthetic", "collab_secret")

DEFAULTS: dict = {
    "mode": "pppfl",
    "seed": 0,
    "dataset": {
        "name": "digits14",  # digits14 | moons | idx | csv | cifar
        "limit": 0,  # 0 = use everything; otherwise deterministic subsample
        "val_fraction": 0.25,
        "concentration": 0.5,
        "downsample_factor": 1,
        "images_path": None,  # idx
        "labels_path": None,  # idx
        "csv_path": None,
        "cifar_path": None,
        "moons_n": 600,
        "moons_noise": 0.05,
    },
    "model": {"hidden": [32]},
    "federation": {
        "clients": 5,
        "sample_clients": None,
        "rounds": 30,
        "cycles": 3,
        "inner_lr": 1e-4,
        "inner_steps": 5,
        "batch_size": 64,
        "outer_lr_max": 3e-4,
        "outer_lr_min": 0.0,
        "temperature": 1.0,
        "ema_momentum": 0.95,
        "ema_scope": "server",
        "finetune_steps": 0,
        "finetune_lr": 1e-3,
        "finetune_optimizer": "sgd",
        "fedavg_epochs": 1,
    },
    "local": {"lr": 1e-3, "optimizer": "adam"},
    "dpgan": {
        "n_teachers": 4,
        "top_k": 300,
        "noise_sigma": 5000.0,
        "vote_threshold": 0.7,
        "guide_lr": 0.08,
        "epsilon_target": 1.0,
        "delta": 1e-5,
        "latent_dim": 8,
        "max_steps_per_class": 35,
        "teacher_hidden": 24,
        "generator_hidden": 24,
        "batch_size": 8,
        "teacher_rounds": 3,
        "teacher_lr": 0.05,
        "student_lr": 0.05,
        "clip_norm": 1.0,
        "output_center": 0.5,
        "dp_enabled": True,
        "stochastic_sign": True,
    },
    "epsilons": None,  # per-client list; None = epsilon_target for everyone
    "synth_per_class": 30,
    "attack": {
        "batch_size": 8,
        "n_neurons": 64,
        "victims": 50,
        "trap_seeds": 20,
        "match_tol": 1e-3,
        "db_tol": 1e-12,
    },
    "sweep": {
        "levels": {
            "high_noise": {"noise_sigma": 5000.0, "epsilon_target": 1.0},
            "low_noise": {"noise_sigma": 4.0, "epsilon_target": 1e6},
            "no_noise": {"dp_enabled": False},
        }
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            # sweep levels are free-form dpgan overrides
            if path == "sweep.levels":
                out[key] = copy.deepcopy(value)
                continue
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(
    path=None, seed: Optional[int] = None, mode: Optional[str] = None
) -> dict:
    """Resolved config: defaults, then the file, then CLI overrides."""
    resolved = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: top level must be an object")
        resolved = _merge(resolved, payload)
    if seed is not None:
        resolved["seed"] = int(seed)
    if mode is not None:
        resolved["mode"] = mode
    validate_config(resolved)
    return resolved


def validate_config(cfg: dict) -> None:
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg['mode']!r}")
    eps = cfg.get("epsilons")
    if eps is not None and len(eps) != cfg["federation"]["clients"]:
        raise ConfigError(
            f"epsilons lists {len(eps)} budgets for {cfg['federation']['clients']} clients"
        )
    if not 0.0 < cfg["dataset"]["val_fraction"] < 1.0:
        raise ConfigError("dataset.val_fraction must lie in (0, 1)")


def config_hash(cfg: dict) -> str:
    return stable_hash(cfg)


def dump_config(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
