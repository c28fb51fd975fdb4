"""Flat dotted-key configuration.

Config files are YAML mappings of ``section.key: value``. Unknown keys are
rejected; every key has a default below.
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Any

import yaml

# key: (default, description)
DEFAULTS: dict[str, tuple[Any, str]] = {
    # scenes and sensors
    "scene.seed": (0, "base seed for scene generation"),
    "scene.n_train": (64, "training scenes"),
    "scene.n_val": (16, "validation scenes"),
    "scene.n_test": (16, "held-out scenes for evaluation and the transfer probe"),
    "scene.n_objects": (6, "objects per scene"),
    "scene.bounds_lo": ([-8.0, -8.0, 0.0], "world / voxel range minimum (m)"),
    "scene.bounds_hi": ([8.0, 8.0, 4.0], "world / voxel range maximum (m)"),
    "scene.voxel_size": ([0.25, 0.25, 0.25], "voxel size per axis (m)"),
    "camera.height": (32, "image height (px)"),
    "camera.width": (64, "image width (px)"),
    "camera.hfov_deg": (90.0, "horizontal field of view (deg)"),
    "camera.position": ([0.0, 0.0, 1.5], "camera center (m)"),
    "camera.yaws": ([0.0], "one entry per camera view (rad from +x)"),
    "lidar.azimuth_count": (256, "beams per revolution"),
    "lidar.elevation_count": (32, "beam rows"),
    # masking
    "mask.enabled": (True, "apply input masking during pre-training"),
    "mask.patch_size": (4, "image mask patch size s (px)"),
    "mask.image_ratio": (0.5, "fraction of image patches replaced by the mask token"),
    "mask.voxel_ratio": (0.9, "fraction of non-empty voxels zeroed"),
    "mask.seed": (0, "mask RNG seed"),
    # network
    "model.seed": (0, "parameter initialisation seed"),
    "model.kappa": (4, "camera downsampling ratio"),
    "model.depth_bins": (8, "depth bins D"),
    "model.context_channels": (16, "camera context channels C = C_I"),
    "model.lidar_channels": (16, "Lidar embedding channels C_L"),
    "model.hidden": (16, "hidden width of encoders and render heads"),
    "model.bev_hidden": (8, "hidden width of the BEV render head"),
    "model.depth_near": (0.5, "nearest depth-bin edge (m); the far edge is the world diagonal"),
    # rendering
    "render.delta_bev": (0.2, "sample step for BEV rays"),
    "render.delta_per": (0.8, "sample step for perspective rays"),
    # objective
    "loss.targets": (["color", "depth_per", "depth_bev"], "enabled reconstruction targets"),
    "loss.lambda_color": (1e4, "color coefficient"),
    "loss.lambda_depth_per": (1e-2, "perspective depth coefficient"),
    "loss.lambda_depth_bev": (1e-2, "BEV depth coefficient"),
    "loss.p_color": (2.0, "p for the color L_p loss"),
    "loss.p_depth": (1.0, "p for the depth L_p losses"),
    "loss.on_masked_only": (False, "restrict the color loss to masked patches"),
    "loss.sparse_depth": (False, "supervise perspective depth only where Lidar points project"),
    # optimisation
    "train.seed": (0, "shuffling seed"),
    "train.epochs": (50, "pre-training epochs"),
    "train.batch_size": (4, "frames per optimizer step"),
    "train.lr": (2e-3, "peak learning rate of the one-cycle schedule"),
    "train.weight_decay": (0.01, "decoupled weight decay"),
    "train.beta1": (0.9, "Adam beta1"),
    "train.beta2": (0.999, "Adam beta2"),
    "train.eps": (1e-8, "Adam epsilon"),
    "train.pct_start": (0.3, "warm-up fraction of the one-cycle schedule"),
    "train.div_factor": (25.0, "initial lr = peak / div_factor"),
    "train.final_div_factor": (1e4, "final lr = peak / final_div_factor"),
    "train.patience": (10, "early-stopping patience (epochs)"),
    "train.clip_norm": (35.0, "global gradient-norm clip"),
    "train.render_every": (1, "write sample renders every N epochs (0 = first epoch and best only)"),
    # transfer probe
    "probe.epochs": (4, "fine-tuning passes over the labeled frames"),
    "probe.batch_size": (4, "frames per probe step"),
    "probe.columns": (512, "BEV columns sampled per frame for the probe loss"),
    "probe.balanced": (True, "weight free and occupied columns equally in the probe loss"),
    "probe.lr": (None, "probe peak lr; null = the pre-training lr"),
    "probe.threshold": (0.5, "occupancy probability threshold"),
    # output
    "output.dir": ("runs/default", "output directory (overridden by NSMAE_OUT)"),
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class Config(dict):
    """A dict of dotted keys with validation."""

    def __getattr__(self, name):
        raise AttributeError(name)

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.items() if k.startswith(p)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def output_dir(self) -> str:
        return os.environ.get("NSMAE_OUT") or self["output.dir"]

    def replace(self, **updates) -> "Config":
        """Copy with updates; keyword names use ``__`` for the dot (train__lr=...)."""
        return make_config({**self, **{k.replace("__", "."): v for k, v in updates.items()}})


def _check(cfg: dict) -> None:
    for key in cfg:
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown configuration key")
    for key in ("mask.image_ratio", "mask.voxel_ratio"):
        if not 0.0 <= float(cfg[key]) <= 1.0:
            raise ConfigError(key, "must lie in [0, 1]")
    h, w, s, k = cfg["camera.height"], cfg["camera.width"], cfg["mask.patch_size"], cfg["model.kappa"]
    if h % s or w % s:
        raise ConfigError("mask.patch_size", f"{s} does not divide the {h}x{w} image")
    if h % k or w % k:
        raise ConfigError("model.kappa", f"{k} does not divide the {h}x{w} image")
    for key in ("render.delta_bev", "render.delta_per"):
        if float(cfg[key]) <= 0:
            raise ConfigError(key, "must be positive")
    for key in ("loss.lambda_color", "loss.lambda_depth_per", "loss.lambda_depth_bev"):
        if float(cfg[key]) < 0:
            raise ConfigError(key, "must be non-negative")
    for key in ("loss.p_color", "loss.p_depth"):
        if float(cfg[key]) < 1:
            raise ConfigError(key, "must be >= 1")
    bad = [t for t in cfg["loss.targets"] if t not in ("color", "depth_per", "depth_bev")]
    if bad:
        raise ConfigError("loss.targets", f"unknown targets {bad}")
    if not cfg["loss.targets"]:
        raise ConfigError("loss.targets", "at least one target required")
    for key in ("train.epochs", "train.batch_size", "scene.n_train", "scene.n_val"):
        if int(cfg[key]) < 1:
            raise ConfigError(key, "must be >= 1")
    if int(cfg["scene.n_objects"]) < 1:
        raise ConfigError("scene.n_objects", "must be >= 1")


def make_config(overrides: dict | None = None) -> Config:
    cfg = {k: v for k, (v, _) in DEFAULTS.items()}
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown configuration key")
        cfg[key] = value
    _check(cfg)
    return Config(cfg)


def load_config(path) -> Config:
    if not os.path.isfile(path):
        raise ConfigError("<file>", f"config file {os.fspath(path)!r} not found")
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError("<file>", "config must be a mapping of dotted keys")
    return make_config(data)


def dump_config(cfg: Config, path) -> None:
    with open(path, "w") as f:
        for key, (_, doc) in DEFAULTS.items():
            f.write(f"# {doc}\n")
            f.write(yaml.safe_dump({key: cfg[key]}, default_flow_style=True, width=200).strip().strip("{}") + "\n")
