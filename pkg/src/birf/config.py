"""Run configuration: nested key/value documents, presets, validation."""

from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from .errors import ConfigError
from .grid import SUPPORTED_FEATURE_DIMS, GridConfig
from .nn_core import LrSchedule
from .train import TrainConfig

FULL = {
    "data": {
        "oracle": None,
        "path": None,
        "format": "blender",
        "downscale": 1,
        "n_train": 20,
        "n_test": 5,
        "resolution": 64,
        "seed": 0,
        "background": [1.0, 1.0, 1.0],
    },
    "grid": {
        "feature_dim": 1,
        "n_levels_3d": 16,
        "min_res_3d": 16,
        "max_res_3d": 1024,
        "table_size_3d": 2**19,
        "n_levels_2d": 4,
        "min_res_2d": 64,
        "max_res_2d": 512,
        "table_size_2d": 2**17,
    },
    "model": {"hidden_width": 128, "pe_freqs": 4, "embedding_width": 15},
    "train": {
        "iterations": 20000,
        "rays_per_batch": 4096,
        "lambda_sparsity": 2.0e-5,
        "lr_schedule": {"base_lr": 0.01, "warmup_iters": 1000, "decay_points": [15000, 18000], "decay_factor": 0.33},
        "seed": 0,
        "step": math.sqrt(3) / 1024,
        "occ_resolution": 128,
        "occ_threshold": 0.01,
        "occ_decay": 0.95,
        "occ_update_interval": 16,
        "occ_warmup_iters": 256,
        "eval_every": 1000,
        "log_every": 100,
    },
    "eval": {"occ_rebuild_passes": 4, "occ_rebuild_seed": 0, "early_stop": 1e-4, "max_views": None},
    "snapshot": {"fp16": False},
    "out": "run",
    "deterministic": False,
}

# CPU-sized variant used for the built-in oracle scenes
DESK_OVERRIDES = {
    "data": {"oracle": "spheres"},
    "grid": {
        "feature_dim": 2,
        "n_levels_3d": 8,
        "min_res_3d": 16,
        "max_res_3d": 128,
        "table_size_3d": 2**15,
        "n_levels_2d": 4,
        "min_res_2d": 32,
        "max_res_2d": 128,
        "table_size_2d": 2**13,
    },
    "train": {
        "iterations": 2000,
        "rays_per_batch": 2048,
        "lr_schedule": {"base_lr": 0.01, "warmup_iters": 100, "decay_points": [1500, 1800], "decay_factor": 0.33},
        "step": math.sqrt(3) / 128,
        "occ_resolution": 32,
        "eval_every": 500,
    },
}


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge; keys absent from ``base`` are rejected by name."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a table")
            out[k] = merge(base[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset(name: str) -> dict:
    if name == "full":
        return copy.deepcopy(FULL)
    if name == "desk":
        return merge(FULL, DESK_OVERRIDES)
    raise ConfigError(f"unknown preset {name!r} (choose full or desk)")


def validate(cfg: dict) -> dict:
    """Check value ranges and cross-field rules; returns ``cfg`` unchanged."""
    data, grid, train = cfg["data"], cfg["grid"], cfg["train"]
    if (data["oracle"] is None) == (data["path"] is None):
        raise ConfigError("exactly one of data.oracle and data.path must be set")
    if data["format"] not in ("blender", "nsvf"):
        raise ConfigError(f"data.format must be blender or nsvf, got {data['format']!r}")
    if grid["feature_dim"] not in SUPPORTED_FEATURE_DIMS:
        raise ConfigError(f"grid.feature_dim must be one of {SUPPORTED_FEATURE_DIMS}, got {grid['feature_dim']!r}")
    for k in ("table_size_3d", "table_size_2d"):
        t = grid[k]
        if not isinstance(t, int) or t < 1 or t & (t - 1):
            raise ConfigError(f"grid.{k} must be a power of two, got {t!r}")
    if grid["n_levels_3d"] < 1 or grid["n_levels_2d"] < 0:
        raise ConfigError("grid needs at least one 3D level")
    if train["iterations"] < 0:
        raise ConfigError("train.iterations must be >= 0")
    if train["lambda_sparsity"] < 0:
        raise ConfigError("train.lambda_sparsity must be >= 0")
    if train["step"] <= 0:
        raise ConfigError("train.step must be positive")
    if len(data["background"]) != 3:
        raise ConfigError("data.background must have three components")
    try:
        build_grid_config(cfg)
        build_train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def build_grid_config(cfg: dict) -> GridConfig:
    return GridConfig.geometric(**cfg["grid"])


def build_train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    s = t.pop("lr_schedule")
    return TrainConfig(lr_schedule=LrSchedule(s["base_lr"], s["warmup_iters"], tuple(s["decay_points"]), s["decay_factor"]), **t)


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def resolve(file_cfg: dict | None, overrides: dict, preset_name: str | None = None) -> dict:
    """Preset, then config file, then flag overrides; validated.

    Without an explicit preset, a config that names an oracle scene starts
    from the desk preset and a dataset path from the full preset.
    """
    layered = merge(FULL, file_cfg or {})
    layered = merge(layered, overrides)
    if preset_name is None:
        preset_name = "desk" if layered["data"]["oracle"] is not None else "full"
    cfg = preset(preset_name)
    if preset_name == "desk" and layered["data"]["path"] is not None:
        cfg["data"]["oracle"] = None
    cfg = merge(cfg, file_cfg or {})
    cfg = merge(cfg, overrides)
    return validate(cfg)
