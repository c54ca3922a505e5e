"""Declarative run configuration: defaults, file loading, canonical hash."""
from __future__ import annotations

import copy
import hashlib
import json

import yaml


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


DEFAULTS: dict = {
    "seed": 0,
    "policy": {
        "width": 512,
        "heads": 8,
        "layers": 1,
        "ff_mult": 4,
        "attention_scale": True,
        "posenc_bands": 6,
        "head_hidden": 256,
        "fusion_mode": "cross_attention",
    },
    "encoder": {
        "basis_seed": 7,
        "sigma_align": 0.3,
        "temperature": 0.07,
        "text_jitter": 0.05,
        "general_mix": 0.85,
    },
    "world": {
        "side": 0.8,
        "render_px": 224,
    },
    "proposals": {
        "k_max": 24,
        "per_object": 3,
        "position_jitter": 0.01,
        "quality_jitter": 0.05,
        "map_threshold": 0.05,
    },
    "sac": {
        "gamma": 0.99,
        "lr": 3.0e-4,
        "alpha_init": 0.2,
        "batch_size": 32,
        "tau": 0.005,
        "updates_per_step": 1,
        "target_entropy_ratio": 0.5,
        "replay_capacity": 20000,
        "alpha_paper_literal": False,
    },
    "guided": {
        "enabled": False,
        "weight": 0.5,
        "window_episodes": 800,
        "kl_direction": "forward",
    },
    "curriculum": {
        "stage1": {"objects": 8, "episodes": 500, "attempt_limit": 5,
                   "max_overlap": 0.25, "cluster": 0.0, "bury_targets": False},
        "stage2": {"objects": 15, "episodes": 1500, "attempt_limit": 8,
                   "max_overlap": 0.65, "cluster": 0.7, "bury_targets": False},
    },
    "eval": {
        "runs_per_case": 15,
        "max_attempts": 8,
        "suite": {
            "seen_cases": 10,
            "unseen_object_cases": 5,
            "unseen_template_cases": 5,
            "objects": 12,
            "max_overlap": 0.7,
            "cluster": 0.7,
            "bury_targets": True,
        },
    },
    "checkpoint_every": 100,
    "library": None,
    "keywords": None,
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Resolved config: defaults <- file <- in-process overrides."""
    doc = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as f:
            loaded = yaml.safe_load(f) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        doc = _merge(doc, loaded)
    if overrides:
        doc = _merge(doc, overrides)
    return doc


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def dump_config(doc: dict, path: str):
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
