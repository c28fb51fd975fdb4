"""Frame preparation: scenes -> sensor data -> reconstruction targets.

All geometry (rigs, rays, lift plans) depends only on the config, so it is
built once in :class:`Geometry` and shared by every sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .embed import LiftGeometry, bin_centers, depth_bin_edges, lift_geometry
from .render import RayBundle, build_rays_bev, build_rays_perspective
from .scene import (
    CameraRig,
    GridMeta,
    Scene,
    VoxelGrid,
    generate_scene,
    gt_bev_depth,
    lidar_projection_mask,
    render_gt_image,
    simulate_lidar,
    voxelize,
)

SPLIT_OFFSETS = {"train": 0, "val": 10_000, "test": 20_000}


@dataclass
class Geometry:
    meta: GridMeta
    bin_edges: np.ndarray
    centers: np.ndarray
    rigs: list[CameraRig]
    rigs_feat: list[CameraRig]
    lifts: list[LiftGeometry]
    per_rays: list[RayBundle]
    bev_rays: RayBundle
    lidar_origin: np.ndarray

    @property
    def depth_span(self) -> tuple[float, float]:
        return float(self.bin_edges[0]), float(self.bin_edges[-1])

    @property
    def z_span(self) -> float:
        return float(self.meta.extents[2] * self.meta.voxel_size[2])

    @classmethod
    def from_config(cls, cfg: Config) -> "Geometry":
        lo, hi = np.asarray(cfg["scene.bounds_lo"], float), np.asarray(cfg["scene.bounds_hi"], float)
        meta = GridMeta(lo, hi, cfg["scene.voxel_size"])
        edges = depth_bin_edges(cfg["model.depth_near"], float(np.linalg.norm(hi - lo)), cfg["model.depth_bins"])
        centers = bin_centers(edges)
        rigs, rigs_feat, lifts, per_rays = [], [], [], []
        for yaw in cfg["camera.yaws"]:
            rig = CameraRig.looking(cfg["camera.height"], cfg["camera.width"], cfg["camera.position"], yaw, cfg["camera.hfov_deg"])
            rf = rig.scaled(cfg["model.kappa"])
            rigs.append(rig)
            rigs_feat.append(rf)
            lifts.append(lift_geometry(rf, centers, meta))
            per_rays.append(build_rays_perspective(rf, centers, cfg["render.delta_per"]))
        bev = build_rays_bev(meta, cfg["render.delta_bev"])
        return cls(meta, edges, centers, rigs, rigs_feat, lifts, per_rays, bev, np.asarray(cfg["camera.position"], float))


@dataclass
class ViewData:
    image: np.ndarray  # (H, W, 3) full-resolution input
    depth: np.ndarray  # (H, W) oracle range, 0 = miss
    color_target: np.ndarray  # (H/k, W/k, 3)
    depth_target_m: np.ndarray  # (H/k, W/k)
    depth_target: np.ndarray  # normalised to [0, 1] over the depth-bin span
    depth_valid: np.ndarray
    lidar_mask: np.ndarray  # (H/k, W/k) cells that received a projected Lidar point


@dataclass
class Sample:
    seed: int
    scene: Scene
    views: list[ViewData]
    pointcloud: np.ndarray
    voxels: VoxelGrid
    bev_depth_m: np.ndarray
    bev_target: np.ndarray  # normalised by the grid height
    bev_valid: np.ndarray


def make_sample(scene: Scene, geom: Geometry, cfg: Config) -> Sample:
    near, far = geom.depth_span
    k = cfg["model.kappa"]
    cloud = simulate_lidar(scene, geom.lidar_origin, cfg["lidar.azimuth_count"], cfg["lidar.elevation_count"])
    views = []
    for rig, rf in zip(geom.rigs, geom.rigs_feat):
        image, depth = render_gt_image(scene, rig)
        ctarget, dtarget = render_gt_image(scene, rf)
        valid = dtarget > 0
        norm = np.where(valid, np.clip((dtarget - near) / (far - near), 0.0, 1.0), 0.0)
        full_mask = lidar_projection_mask(cloud, rig)
        lmask = full_mask.reshape(rf.height, k, rf.width, k).any(axis=(1, 3))
        views.append(ViewData(image, depth, ctarget, dtarget, norm, valid, lmask))
    grid = voxelize(cloud, geom.meta, None)
    bev_m, bev_valid = gt_bev_depth(grid)
    return Sample(scene.seed, scene, views, cloud, grid, bev_m, bev_m / geom.z_span, bev_valid)


def scene_seed(cfg: Config, split: str, index: int) -> int:
    return int(cfg["scene.seed"]) * 1_000_000 + SPLIT_OFFSETS[split] + index


def make_split(cfg: Config, split: str, geom: Geometry | None = None, count: int | None = None) -> list[Sample]:
    geom = geom or Geometry.from_config(cfg)
    n = count if count is not None else int(cfg[f"scene.n_{split}"])
    bounds = (cfg["scene.bounds_lo"], cfg["scene.bounds_hi"])
    out = []
    for i in range(n):
        scene = generate_scene(scene_seed(cfg, split, i), cfg["scene.n_objects"], bounds)
        out.append(make_sample(scene, geom, cfg))
    return out
