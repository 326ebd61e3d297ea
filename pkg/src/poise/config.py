"""Flat JSON run configuration with defaults, overrides, and a stable hash.

One flat dict drives a whole pipeline run. Unknown keys are rejected (a
typo'd knob silently reverting to its default is the worst failure mode a
config system can have), and the sha256 of the canonical dump keys the
artifact cache: same hash, same bytes out.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

ALL_STAGES = (
    "synth",
    "occlude",
    "train-pose2sil",
    "adapt-pose",
    "train-fusion",
    "eval",
    "export",
)

DEFAULTS = {
    # global
    "seed": 0,
    "height": 96,
    "width": 96,
    "stages": list(ALL_STAGES),
    # synth
    "train_scenes": 2000,
    "test_scenes": 400,
    "background": "noise_rects",
    "scene_margin": 5,
    # occlude
    "occlusion_kind": "random_erase",
    "occlusion_severity": 20,
    "occlusion_texture": "per_pixel_noise",
    # train-pose2sil
    "pose2sil_epochs": 120,
    "pose2sil_lr": 1e-4,
    "pose2sil_batch": 32,
    "pose2sil_channels": 128,
    # adapt-pose
    "adapt_epochs": 8,
    "adapt_warmup": 4,
    "adapt_batch": 16,
    "adapt_lr": 1e-4,
    "ema_alpha": 0.999,
    "heatmap_sigma": 2.0,
    "consistency_weight": 1.0,
    # train-fusion
    "fusion_epochs": 12,
    "fusion_batch": 16,
    "fusion_lr": 1e-3,
    "lambda1": 1.0,
    "lambda2": 1.0,
    "lambda3": 0.5,
    "tau": 0.9,
    "pl_start_epoch": 5,
    "fusion_augment": True,
    "seg_source": "naive_occluded",  # or "oracle"
    "pose_source": "oracle_occluded",  # or "oracle" / "adapted"
    # eval
    "eval_split": "occluded",  # or "clean"
    "eval_methods": ["poise", "i_s", "i_p"],
    # export
    "export_frames": 10,
    "export_subject": "subj001",
    "export_view": "000",
}

_CHOICES = {
    "background": ("noise_rects", "hard"),
    "occlusion_kind": ("random_erase", "object_paste"),
    "seg_source": ("naive_occluded", "oracle"),
    "pose_source": ("oracle_occluded", "oracle", "adapted"),
    "eval_split": ("occluded", "clean"),
}


def _coerce(key: str, value):
    want = DEFAULTS[key]
    if isinstance(want, bool):
        if isinstance(value, bool):
            return value
        raise ValueError(f"{key} must be a boolean, got {value!r}")
    if isinstance(want, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(want, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(want, str) and isinstance(value, str):
        return value
    if isinstance(want, list):
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return list(value)
        raise ValueError(f"{key} must be a list of strings, got {value!r}")
    raise ValueError(f"{key} must be {type(want).__name__}, got {value!r}")


def _validate(cfg: dict) -> dict:
    for key, choices in _CHOICES.items():
        if cfg[key] not in choices:
            raise ValueError(f"{key} must be one of {choices}, got {cfg[key]!r}")
    unknown_stages = set(cfg["stages"]) - set(ALL_STAGES)
    if unknown_stages:
        raise ValueError(f"unknown stages: {sorted(unknown_stages)} (know {list(ALL_STAGES)})")
    unknown_methods = set(cfg["eval_methods"]) - {"poise", "i_s", "i_p", "oracle"}
    if unknown_methods:
        raise ValueError(f"unknown eval methods: {sorted(unknown_methods)}")
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file, then overrides; unknown keys rejected."""
    cfg = dict(DEFAULTS)
    cfg["stages"] = list(DEFAULTS["stages"])
    cfg["eval_methods"] = list(DEFAULTS["eval_methods"])
    layers = []
    if path is not None:
        loaded = json.loads(Path(path).read_text())
        if not isinstance(loaded, dict):
            raise ValueError(f"config file must hold a JSON object, got {type(loaded).__name__}")
        layers.append(loaded)
    if overrides:
        layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ValueError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    return _validate(cfg)


def parse_override(text: str) -> tuple:
    """'key=value' -> (key, parsed value); values parse as JSON, else string."""
    if "=" not in text:
        raise ValueError(f"override must look like key=value, got {text!r}")
    key, _, raw = text.partition("=")
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
