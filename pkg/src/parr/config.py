"""Run configuration: TOML file, flag overrides, and an env seed override.

Precedence, highest first: command-line --set/--seed flags, the PARR_SEED
environment variable (seed only), file values, built-in defaults.  Unknown
sections or keys are rejected outright so typos fail loudly.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .backbone import BackboneConfig, grad_config, full_size_config, tiny_config
from .errors import ConfigError
from .margin import MarginParams, RetTrainConfig, RetrievalHeadsConfig
from .recognition import ParTrainConfig

SEED_ENV_VAR = "PARR_SEED"

DEFAULTS: dict = {
    "seed": 0,
    "backbone": {
        "preset": "tiny",
        "n_attr": 8,
    },
    "par_train": {
        "epochs": 4,
        "batch_size": 32,
        "lr": 3e-4,
        "weight_decay": 0.01,
    },
    "ret_train": {
        "steps": 400,
        "batch_size": 128,
        "lr": 1e-3,
        "weight_decay": 0.01,
        "dim_vis": 64,
        "dim_w": 16,
        "n_w": 48,
        "provider_seed": 0,
        "scale": 16.0,
        "margin": 0.1,
        "beta1": 0.3,
        "beta2": 0.7,
        "margin_on_negatives": True,
        "double_scale": False,
    },
    "eval": {
        "query_mode": "hard+soft",
        "subset_match": False,
        "batch_size": 64,
        "threshold": 0.5,
    },
    "synth": {
        "n_categories": 25,
        "images_per_category": 125,
        "noise_std": 0.05,
        "unseen_fraction": 0.2,
        "train_fraction": 0.8,
        "gallery_fraction": 0.12,
        "query_fraction": 0.08,
        "jitter": 2,
        "image_h": 32,
        "image_w": 16,
    },
}

_PRESETS = {"tiny": tiny_config, "full": full_size_config, "grad": grad_config}


def _check_known(config: dict) -> None:
    for section, value in config.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section or key {section!r}")
        if isinstance(DEFAULTS[section], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section {section!r} must be a table")
            for key in value:
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
        # scalar top-level entries (seed) need no inner check


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    dotted, raw = item.split("=", 1)
    keys = dotted.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad override key {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return keys, value


def resolve_config(
    config_path: str | Path | None = None,
    overrides: list[str] | None = None,
    seed_flag: int | None = None,
) -> dict:
    """Merge defaults <- file <- PARR_SEED <- flags and validate keys."""
    merged = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            file_cfg = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
        _check_known(file_cfg)
        merged = _merge(merged, file_cfg)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            merged["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR}={env_seed!r} is not an integer") from exc
    for item in overrides or []:
        keys, value = _parse_override(item)
        probe: dict = {}
        node = probe
        for key in keys[:-1]:
            node[key] = {}
            node = node[key]
        node[keys[-1]] = value
        _check_known(probe)
        node_target = merged
        for key in keys[:-1]:
            node_target = node_target[key]
        node_target[keys[-1]] = value
    if seed_flag is not None:
        merged["seed"] = seed_flag
    return merged


def backbone_config_from(cfg: dict, image_hw: tuple[int, int]) -> BackboneConfig:
    section = cfg["backbone"]
    preset = section["preset"]
    if preset not in _PRESETS:
        raise ConfigError(
            f"unknown backbone preset {preset!r}; pick from {sorted(_PRESETS)}"
        )
    if preset == "full":
        return full_size_config(n_attr=section["n_attr"])
    return _PRESETS[preset](n_attr=section["n_attr"], image_hw=image_hw)


def par_train_config_from(cfg: dict) -> ParTrainConfig:
    s = cfg["par_train"]
    return ParTrainConfig(
        epochs=int(s["epochs"]),
        batch_size=int(s["batch_size"]),
        lr=float(s["lr"]),
        weight_decay=float(s["weight_decay"]),
        seed=int(cfg["seed"]),
    )


def margin_params_from(cfg: dict) -> MarginParams:
    s = cfg["ret_train"]
    return MarginParams(
        scale=float(s["scale"]),
        margin=float(s["margin"]),
        beta1=float(s["beta1"]),
        beta2=float(s["beta2"]),
        margin_on_negatives=bool(s["margin_on_negatives"]),
        double_scale=bool(s["double_scale"]),
    )


def ret_train_config_from(cfg: dict) -> RetTrainConfig:
    s = cfg["ret_train"]
    return RetTrainConfig(
        steps=int(s["steps"]),
        batch_size=int(s["batch_size"]),
        lr=float(s["lr"]),
        weight_decay=float(s["weight_decay"]),
        seed=int(cfg["seed"]),
        margin=margin_params_from(cfg),
    )


def heads_config_from(cfg: dict, feature_dim: int, n_attr: int) -> RetrievalHeadsConfig:
    s = cfg["ret_train"]
    return RetrievalHeadsConfig(
        feature_dim=feature_dim,
        n_attr=n_attr,
        n_w=int(s["n_w"]),
        dim_w=int(s["dim_w"]),
        dim_vis=int(s["dim_vis"]),
    )


def synth_config_kwargs(cfg: dict) -> dict:
    s = cfg["synth"]
    return {
        "image_hw": (int(s["image_h"]), int(s["image_w"])),
        "n_categories": int(s["n_categories"]),
        "images_per_category": int(s["images_per_category"]),
        "noise_std": float(s["noise_std"]),
        "seed": int(cfg["seed"]),
        "unseen_fraction": float(s["unseen_fraction"]),
        "split_fractions": (
            float(s["train_fraction"]),
            float(s["gallery_fraction"]),
            float(s["query_fraction"]),
        ),
        "jitter": int(s["jitter"]),
    }
