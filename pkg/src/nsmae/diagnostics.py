"""Finite-difference check of the whole masked encode-render-loss pipeline."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import Config
from .data import Geometry, make_sample
from .model import NSMAE
from .scene import generate_scene

MODULES = ("embed.camera", "embed.lidar", "render.per", "render.bev", "mask")


@dataclass
class PipelineCheck:
    max_rel_error: float
    per_module: dict[str, float]
    coords_per_module: dict[str, int]
    seconds: float

    @property
    def n_coords(self) -> int:
        return sum(self.coords_per_module.values())


def module_of(path: str) -> str:
    for m in MODULES:
        if path.startswith(m):
            return m
    return path.split(".")[0]


def pipeline_grad_check(cfg: Config, n_coords: int = 240, eps: float = 1e-5, seed: int = 0, scene_seed: int = 3) -> PipelineCheck:
    """Central differences vs backprop on ``n_coords`` parameter entries spread over every module.

    Masks are drawn once from ``seed``, so the loss is a smooth function of
    the parameters (mask token included).
    """
    t0 = time.perf_counter()
    geom = Geometry.from_config(cfg)
    bounds = (cfg["scene.bounds_lo"], cfg["scene.bounds_hi"])
    sample = make_sample(generate_scene(scene_seed, cfg["scene.n_objects"], bounds), geom, cfg)
    model = NSMAE(cfg, geom)
    params = model.parameters()
    names = list(params)
    tensors = [params[n] for n in names]
    ir, vr = cfg["mask.image_ratio"], cfg["mask.voxel_ratio"]

    def fn(*_):
        return model.loss(sample, ir, vr, seed)[0]

    rng = np.random.default_rng(seed)
    groups: dict[str, list[int]] = {}
    for i, n in enumerate(names):
        groups.setdefault(module_of(n), []).append(i)
    share = int(np.ceil(n_coords / len(groups)))
    per_module, counts = {}, {}
    for mod, idx in groups.items():
        sizes = np.array([tensors[i].size for i in idx])
        # every tensor gets at least one coordinate; the rest go by size
        picks = [(i, int(rng.integers(tensors[i].size))) for i in idx]
        extra = max(share - len(picks), 0)
        owners = rng.choice(len(idx), size=extra, p=sizes / sizes.sum())
        picks += [(idx[o], int(rng.integers(sizes[o]))) for o in owners]
        per_module[mod] = ad.grad_check(fn, tensors, eps, picks)
        counts[mod] = len(picks)
    return PipelineCheck(max(per_module.values()), per_module, counts, time.perf_counter() - t0)
