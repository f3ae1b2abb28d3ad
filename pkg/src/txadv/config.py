"""Experiment configuration: JSON file with strict, fail-fast validation.

Unknown keys anywhere in the file are errors; missing keys fall back to the
defaults below. All randomness is controlled by the explicit `seeds` block;
the CLI's --seed flag re-derives every entry from one master value.
"""
from __future__ import annotations

import copy
import json

DEFAULT_CONFIG = {
    "dataset_name": "synthetic",
    "out_dir": "runs/default",
    "dataset": {
        "n_sequences": 3000,
        "num_classes": 2,
        "vocab_size": 200,
        "signal_strength": 0.07,
        "signature_size": 6,
        "common_tilt": 0.10,
        "length_range": [12, 30],
        "zipf_exponent": 1.0,
        "amount_median": 40.0,
        "amount_sigma": 0.6,
        "amount_token_spread": 0.5,
        "test_fraction": 0.1,
        "val_fraction": 0.1,
    },
    "split_fraction": 0.65,
    "target": {
        "architecture": "gru",
        "hidden_size": 64,
        "token_dim": 24,
        "amount_dim": 8,
        "cnn_filters": 64,
        "kernel_width": 3,
        "pooling": "max",
        "dropout": 0.1,
        "n_bins": 100,
    },
    "substitute": {
        "architecture": "gru",
        "hidden_size": 64,
        "token_dim": 24,
        "amount_dim": 8,
        "cnn_filters": 64,
        "kernel_width": 3,
        "pooling": "max",
        "dropout": 0.1,
        "n_bins": 100,
    },
    "train": {
        "batch_size": 32,
        "max_epochs": 40,
        "patience": 6,
        "learning_rate": 0.0025,
        "validation_fraction": 0.15,
    },
    "lm": {
        "hidden_size": 48,
        "token_dim": 24,
        "amount_dim": 8,
        "mask_rate": 0.15,
        "batch_size": 32,
        "max_epochs": 12,
        "patience": 3,
        "learning_rate": 0.0025,
        "n_bins": 100,
    },
    "attacks": [
        {"name": "concat_fgsm_seq", "k": 2, "eps": 1.0, "steps": 15},
        {"name": "fgsm", "eps": 1.0, "steps": 30},
    ],
    "eval": {
        "n_examples": 200,
        "mode": "proba",
        "white_box": False,
    },
    "defense": {
        "attack": "concat_fgsm_seq",
        "counts": [0, 200, 800],
        "fine_tune_epochs": 2,
        "n_seeds": 5,
        "n_eval": 100,
        "detector_attacks": ["concat_fgsm_seq"],
        "detector_examples": 200,
        "detector_epochs": 10,
    },
    "sweep": {
        "amount_limit": {
            "attack": "concat_fgsm_seq",
            "grid": [300, 500, 1000, 3000, 5000, 10000, 100000],
        },
        "k_wer": {"attack": "concat_fgsm_seq", "grid": [1, 2, 4, 8]},
        "num_samples": {"attack": "concat_sf", "grid": [10, 50, 100, 200, 400]},
        "seq_length": {"attack": "concat_fgsm_seq", "groups": 5},
        "n_examples": 100,
    },
    "report": {
        "histogram_bins": 30,
        "baseline_samples": 200,
        "baseline_k": 2,
    },
    "tau_quantile": 0.95,
    "seeds": {
        "data": 1097,
        "test_split": 1098,
        "split": 500,
        "target": 600,
        "substitute": 700,
        "mlm": 800,
        "causal_lm": 900,
        "attack": 1000,
        "defense": 1100,
    },
}

_SEED_OFFSETS = {
    "data": 0,
    "test_split": 1,
    "split": 2,
    "target": 3,
    "substitute": 4,
    "mlm": 5,
    "causal_lm": 6,
    "attack": 7,
    "defense": 8,
}

_ATTACK_ENTRY_KEYS = {
    "name", "k", "num_samples", "eps", "steps", "temperature",
    "tau", "amount_limit", "lm_top_candidates",
}


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


def _merge(defaults, supplied, path):
    if not isinstance(supplied, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    merged = copy.deepcopy(defaults)
    for key, value in supplied.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if key in ("attacks", "detector_attacks"):
            merged[key] = copy.deepcopy(value)
        elif isinstance(defaults[key], dict):
            merged[key] = _merge(defaults[key], value, where)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _validate_attacks(entries):
    from .attacks import ATTACKS  # late import, avoids a cycle

    if not isinstance(entries, list) or not entries:
        raise ConfigError("attacks must be a non-empty list")
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"attacks[{i}] must be an object")
        unknown = set(entry) - _ATTACK_ENTRY_KEYS
        if unknown:
            raise ConfigError(f"attacks[{i}] has unknown keys: {sorted(unknown)}")
        name = entry.get("name")
        if name not in ATTACKS:
            raise ConfigError(f"attacks[{i}].name {name!r} is not a known attack")


def validate_config(cfg: dict) -> dict:
    merged = _merge(DEFAULT_CONFIG, cfg, "")
    _validate_attacks(merged["attacks"])
    if merged["eval"]["mode"] not in ("label", "proba"):
        raise ConfigError("eval.mode must be 'label' or 'proba'")
    missing = set(_SEED_OFFSETS) - set(merged["seeds"])
    if missing:
        raise ConfigError(f"seeds block is missing entries: {sorted(missing)}")
    return merged


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(raw)


def apply_master_seed(cfg: dict, master: int) -> dict:
    """Re-derive every named seed from one master value."""
    out = copy.deepcopy(cfg)
    out["seeds"] = {name: master + off for name, off in _SEED_OFFSETS.items()}
    return out
