"""Synthetic scenes and oracle sensors.

Scenes are a handful of axis-aligned boxes and spheres resting on z = 0.
Both sensors are driven by the same analytic ray caster, so camera depth,
Lidar ranges and voxel occupancy are mutually consistent to f64 rounding.

World frame: x forward, y left, z up (metres). Camera frame: x right,
y down, z along the optical axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SKY_COLOR = np.array([0.55, 0.70, 0.90])
DEFAULT_BOUNDS = ((-8.0, -8.0, 0.0), (8.0, 8.0, 4.0))


class SceneError(ValueError):
    pass


@dataclass
class SceneObject:
    kind: str  # "box" | "sphere"
    center: np.ndarray
    extent: np.ndarray  # box half-sizes, or (r, r, r) for a sphere
    color: np.ndarray

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.extent

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.extent


@dataclass
class Scene:
    objects: list[SceneObject]
    world_bounds: tuple[np.ndarray, np.ndarray]
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "world_bounds": [list(map(float, self.world_bounds[0])), list(map(float, self.world_bounds[1]))],
            "objects": [
                {
                    "kind": o.kind,
                    "center": o.center.tolist(),
                    "extent": o.extent.tolist(),
                    "color": o.color.tolist(),
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        lo, hi = (np.asarray(b, dtype=float) for b in d["world_bounds"])
        objs = [
            SceneObject(o["kind"], np.asarray(o["center"], float), np.asarray(o["extent"], float), np.asarray(o["color"], float))
            for o in d["objects"]
        ]
        return cls(objs, (lo, hi), int(d.get("seed", 0)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _bounds(world_bounds) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = (np.asarray(b, dtype=float) for b in world_bounds)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise SceneError(f"degenerate world bounds {world_bounds}")
    return lo, hi


def generate_scene(
    seed: int,
    n_objects: int = 6,
    world_bounds=DEFAULT_BOUNDS,
    keep_clear: float = 1.5,
    max_tries: int = 2000,
) -> Scene:
    """Place ``n_objects`` non-overlapping boxes/spheres on the ground plane.

    The disc of radius ``keep_clear`` around the x-y origin stays empty so the
    sensor rig never starts inside an object.
    """
    if n_objects < 1:
        raise SceneError("n_objects must be >= 1")
    lo, hi = _bounds(world_bounds)
    rng = np.random.default_rng(seed)
    height = hi[2] - lo[2]
    placed: list[tuple[np.ndarray, float]] = []
    objects: list[SceneObject] = []
    tries = 0
    while len(objects) < n_objects:
        tries += 1
        if tries > max_tries:
            raise SceneError(f"cannot place {n_objects} objects inside bounds {lo.tolist()}..{hi.tolist()}")
        color = rng.uniform(0.05, 1.0, size=3)
        if rng.random() < 0.5:
            half = np.array([rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0), rng.uniform(0.3, 0.9 * height / 2)])
            kind = "box"
        else:
            r = rng.uniform(0.3, min(1.0, 0.45 * height))
            half = np.array([r, r, r])
            kind = "sphere"
        radius_xy = float(np.hypot(half[0], half[1]))
        if np.any(2 * half[:2] >= hi[:2] - lo[:2]):
            continue
        xy = rng.uniform(lo[:2] + half[:2], hi[:2] - half[:2])
        center = np.array([xy[0], xy[1], lo[2] + half[2]])
        if np.hypot(*center[:2]) < keep_clear + radius_xy:
            continue
        if any(np.hypot(*(center[:2] - c[:2])) < radius_xy + r2 + 0.1 for c, r2 in placed):
            continue
        placed.append((center, radius_xy))
        objects.append(SceneObject(kind, center, half, color))
    return Scene(objects, (lo, hi), seed)


# ------------------------------------------------------------------ ray cast


def raycast_many(scene: Scene, origins: np.ndarray, directions: np.ndarray):
    """Vectorised nearest-hit query.

    Returns (hit, distance, color, object_index); misses have distance 0,
    sky color and index -1.
    """
    o = np.broadcast_to(np.asarray(origins, float), np.shape(directions)).reshape(-1, 3)
    d = np.asarray(directions, float).reshape(-1, 3)
    n = d.shape[0]
    best = np.full(n, np.inf)
    which = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        for k, obj in enumerate(scene.objects):
            if obj.kind == "box":
                t1 = (obj.lo - o) * inv
                t2 = (obj.hi - o) * inv
                # zero direction components: inside slab -> (-inf, inf), outside -> empty
                par = d == 0
                inside = (o >= obj.lo) & (o <= obj.hi)
                t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
                t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
                tnear = np.max(np.minimum(t1, t2), axis=1)
                tfar = np.min(np.maximum(t1, t2), axis=1)
                t = np.where(tnear > 0, tnear, tfar)
                ok = (tnear <= tfar) & (t > 0)
            else:
                oc = o - obj.center
                b = np.einsum("ij,ij->i", oc, d)
                c = np.einsum("ij,ij->i", oc, oc) - obj.extent[0] ** 2
                disc = b * b - c
                sq = np.sqrt(np.maximum(disc, 0.0))
                t0 = -b - sq
                t1s = -b + sq
                t = np.where(t0 > 0, t0, t1s)
                ok = (disc >= 0) & (t > 0)
            closer = ok & (t < best)
            best = np.where(closer, t, best)
            which = np.where(closer, k, which)
    hit = which >= 0
    dist = np.where(hit, best, 0.0)
    colors = np.tile(SKY_COLOR, (n, 1))
    for k, obj in enumerate(scene.objects):
        colors[which == k] = obj.color
    return hit, dist, colors, which


def raycast(scene: Scene, origin, direction):
    """Single-ray query: (hit, distance m, color)."""
    hit, dist, color, _ = raycast_many(scene, np.asarray(origin, float)[None], np.asarray(direction, float)[None])
    return bool(hit[0]), float(dist[0]), color[0]


# -------------------------------------------------------------------- camera


def _look_rotation(yaw: float) -> np.ndarray:
    """world <- camera rotation for a level camera facing ``yaw`` (rad from +x)."""
    c, s = math.cos(yaw), math.sin(yaw)
    forward = np.array([c, s, 0.0])
    right = np.array([s, -c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return np.stack([right, down, forward], axis=1)


@dataclass
class CameraRig:
    rotation: np.ndarray  # world <- camera
    translation: np.ndarray
    K: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, float)
        self.translation = np.asarray(self.translation, float)
        self.K = np.asarray(self.K, float)
        r = self.rotation
        if not (np.allclose(r.T @ r, np.eye(3), atol=1e-9) and np.linalg.det(r) > 0):
            raise SceneError("camera rotation must be orthonormal with det +1")
        fx, fy, cx, cy = self.K[0, 0], self.K[1, 1], self.K[0, 2], self.K[1, 2]
        if fx <= 0 or fy <= 0:
            raise SceneError("focal lengths must be positive")
        if not (0 <= cx <= self.width and 0 <= cy <= self.height):
            raise SceneError("principal point must lie inside the image")

    @classmethod
    def looking(cls, height: int, width: int, position=(0.0, 0.0, 1.5), yaw: float = 0.0, hfov_deg: float = 90.0):
        f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
        K = np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1.0]])
        return cls(_look_rotation(yaw), np.asarray(position, float), K, height, width)

    def scaled(self, factor: int) -> "CameraRig":
        """Rig whose pixels are ``factor`` x ``factor`` blocks of this one."""
        if self.height % factor or self.width % factor:
            raise SceneError(f"resolution {self.height}x{self.width} not divisible by {factor}")
        K = self.K.copy()
        K[:2] /= factor
        return CameraRig(self.rotation, self.translation, K, self.height // factor, self.width // factor)

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit world-frame directions through every pixel center, (H, W, 3)."""
        v, u = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        return self.rays_through(u, v)

    def rays_through(self, u, v) -> tuple[np.ndarray, np.ndarray]:
        fx, fy, cx, cy = self.K[0, 0], self.K[1, 1], self.K[0, 2], self.K[1, 2]
        cam = np.stack([(np.asarray(u) - cx) / fx, (np.asarray(v) - cy) / fy, np.ones(np.shape(u))], axis=-1)
        cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
        return np.broadcast_to(self.translation, cam.shape), cam @ self.rotation.T

    def project(self, points: np.ndarray):
        """World points -> (u, v, camera z)."""
        cam = (np.asarray(points, float) - self.translation) @ self.rotation
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.K[0, 0] * cam[:, 0] / z + self.K[0, 2]
            v = self.K[1, 1] * cam[:, 1] / z + self.K[1, 2]
        return u, v, z

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "K": self.K.tolist(),
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls(d["rotation"], d["translation"], d["K"], int(d["height"]), int(d["width"]))


def render_gt_image(scene: Scene, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    """One oracle ray per pixel center: (H, W, 3) image and (H, W) range in metres."""
    origins, dirs = rig.pixel_rays()
    _, dist, color, _ = raycast_many(scene, origins, dirs)
    return color.reshape(rig.height, rig.width, 3), dist.reshape(rig.height, rig.width)


# --------------------------------------------------------------------- lidar


def object_intensity(index: int) -> float:
    """Deterministic per-object return intensity in [0.1, 0.9]."""
    return 0.1 + 0.8 * ((0.6180339887498949 * (index + 1)) % 1.0)


def simulate_lidar(
    scene: Scene,
    origin,
    azimuth_count: int,
    elevation_count: int,
    elevation_range_deg: tuple[float, float] = (-30.0, 10.0),
) -> np.ndarray:
    """Single sweep on a uniform (azimuth, elevation) grid; returns (n, 4) x, y, z, r."""
    if azimuth_count < 1 or elevation_count < 1:
        raise SceneError("beam counts must be >= 1")
    az = np.arange(azimuth_count) * (2 * math.pi / azimuth_count)
    if elevation_count == 1:
        el = np.array([math.radians(sum(elevation_range_deg) / 2)])
    else:
        el = np.radians(np.linspace(*elevation_range_deg, elevation_count))
    A, E = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    origin = np.asarray(origin, float)
    hit, dist, _, which = raycast_many(scene, origin[None], dirs)
    pts = origin + dirs[hit] * dist[hit, None]
    r = np.array([object_intensity(k) for k in which[hit]]).reshape(-1, 1)
    return np.concatenate([pts, r], axis=1) if len(pts) else np.zeros((0, 4))


# ---------------------------------------------------------------- voxel grid


@dataclass
class GridMeta:
    lo: np.ndarray
    hi: np.ndarray
    voxel_size: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, float)
        self.hi = np.asarray(self.hi, float)
        self.voxel_size = np.broadcast_to(np.asarray(self.voxel_size, float), (3,)).copy()
        if np.any(self.voxel_size <= 0):
            raise SceneError("voxel size must be positive on every axis")
        if np.any(self.hi <= self.lo):
            raise SceneError("degenerate grid range")

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(int(math.ceil(round(x, 9))) for x in (self.hi - self.lo) / self.voxel_size)

    @property
    def n_cells(self) -> int:
        X, Y, Z = self.extents
        return X * Y * Z

    def cell_index(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(flat index, in-range mask) for world points."""
        ijk = np.floor((np.asarray(points, float) - self.lo) / self.voxel_size).astype(np.int64)
        ext = np.array(self.extents)
        ok = np.all((ijk >= 0) & (ijk < ext), axis=1)
        flat = np.ravel_multi_index(tuple(np.clip(ijk, 0, ext - 1).T), self.extents) if len(ijk) else np.zeros(0, np.int64)
        return flat, ok

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "voxel_size": self.voxel_size.tolist()}


@dataclass
class VoxelGrid:
    meta: GridMeta
    features: np.ndarray  # (X, Y, Z, 2): occupancy, mean intensity
    counts: np.ndarray  # (X, Y, Z) points per cell

    @property
    def extents(self):
        return self.meta.extents

    @property
    def occupied(self) -> np.ndarray:
        return self.counts > 0


def voxelize(points: np.ndarray, grid_range, voxel_size) -> VoxelGrid:
    meta = grid_range if isinstance(grid_range, GridMeta) else GridMeta(grid_range[0], grid_range[1], voxel_size)
    ext = meta.extents
    counts = np.zeros(meta.n_cells)
    isum = np.zeros(meta.n_cells)
    pts = np.asarray(points, float).reshape(-1, 4)
    if len(pts):
        flat, ok = meta.cell_index(pts[:, :3])
        counts = np.bincount(flat[ok], minlength=meta.n_cells).astype(float)
        isum = np.bincount(flat[ok], weights=pts[ok, 3], minlength=meta.n_cells)
    occ = counts > 0
    feats = np.zeros((meta.n_cells, 2))
    feats[occ, 0] = 1.0
    feats[occ, 1] = isum[occ] / counts[occ]
    return VoxelGrid(meta, feats.reshape(ext + (2,)), counts.reshape(ext))


def gt_bev_depth(grid: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    """Top-down distance from z_max to the center of the highest occupied voxel.

    Returns (depth X x Y in metres, validity X x Y); empty columns are invalid
    and carry depth 0.
    """
    occ = grid.occupied
    Z = occ.shape[2]
    valid = occ.any(axis=2)
    top = Z - 1 - np.argmax(occ[:, :, ::-1], axis=2)
    vz = grid.meta.voxel_size[2]
    z_top_plane = grid.meta.lo[2] + Z * vz
    depth = z_top_plane - (grid.meta.lo[2] + (top + 0.5) * vz)
    return np.where(valid, depth, 0.0), valid


# --------------------------------------------------------------- frame pairs


@dataclass
class FramePair:
    image: np.ndarray
    gt_depth_per: np.ndarray
    pointcloud: np.ndarray
    rig: CameraRig
    lidar_depth_mask: np.ndarray = field(default=None)  # pixels hit by a projected Lidar point

    def to_dict(self) -> dict:
        return {
            "image": self.image.tolist(),
            "gt_depth_per": self.gt_depth_per.tolist(),
            "pointcloud": self.pointcloud.tolist(),
            "rig": self.rig.to_dict(),
            "lidar_depth_mask": None if self.lidar_depth_mask is None else self.lidar_depth_mask.astype(int).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FramePair":
        mask = d.get("lidar_depth_mask")
        return cls(
            np.asarray(d["image"], float),
            np.asarray(d["gt_depth_per"], float),
            np.asarray(d["pointcloud"], float).reshape(-1, 4),
            CameraRig.from_dict(d["rig"]),
            None if mask is None else np.asarray(mask, bool),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict())


def lidar_projection_mask(points: np.ndarray, rig: CameraRig) -> np.ndarray:
    mask = np.zeros((rig.height, rig.width), dtype=bool)
    if len(points) == 0:
        return mask
    u, v, z = rig.project(points[:, :3])
    ok = (z > 0) & (u >= 0) & (u < rig.width) & (v >= 0) & (v < rig.height)
    mask[v[ok].astype(int), u[ok].astype(int)] = True
    return mask


def make_frame(
    scene: Scene,
    rig: CameraRig,
    lidar_origin=None,
    azimuth_count: int = 256,
    elevation_count: int = 32,
) -> FramePair:
    image, depth = render_gt_image(scene, rig)
    origin = rig.translation if lidar_origin is None else np.asarray(lidar_origin, float)
    cloud = simulate_lidar(scene, origin, azimuth_count, elevation_count)
    return FramePair(image, depth, cloud, rig, lidar_projection_mask(cloud, rig))
