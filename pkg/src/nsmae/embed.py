"""Multi-modal embedding network: camera encoder, Lidar encoder, lift-splat, fusion.

Layouts are channel-last throughout:
    perspective embedding  (H/k, W/k, D, C)
    BEV embeddings         (X, Y, Z, C)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .masking import MaskedImage, MaskedVoxels
from .nn import Conv
from .scene import CameraRig, GridMeta


class EmbedError(ValueError):
    pass


def depth_bin_edges(near: float, far: float, n_bins: int) -> np.ndarray:
    if not 0 < near < far or n_bins < 1:
        raise EmbedError(f"bad depth range [{near}, {far}] with {n_bins} bins")
    return np.linspace(near, far, n_bins + 1)


def bin_centers(edges: np.ndarray) -> np.ndarray:
    return 0.5 * (edges[:-1] + edges[1:])


@dataclass
class PerspectiveEmbedding:
    tensor: ad.Tensor  # (H/k, W/k, D, C)
    depth_prob: ad.Tensor  # (H/k, W/k, D)
    kappa: int
    bin_edges: np.ndarray


class CameraEncoder:
    """Strided conv stack; emits C context channels and D depth logits per cell."""

    def __init__(self, rng, kappa: int = 4, depth_bins: int = 8, channels: int = 16, hidden: int = 16, prefix="embed.camera"):
        n_down = int(round(math.log2(kappa)))
        if kappa < 1 or 2**n_down != kappa:
            raise EmbedError(f"downsampling ratio must be a power of two, got {kappa}")
        self.kappa, self.depth_bins, self.channels = kappa, depth_bins, channels
        self.convs = []
        cin = 3
        for i in range(n_down):
            self.convs.append(Conv(f"{prefix}.conv{i + 1}", (3, 3), cin, hidden, rng, stride=2, padding=1))
            cin = hidden
        self.out = Conv(f"{prefix}.out", (1, 1), cin, channels + depth_bins, rng)

    def parameters(self) -> dict[str, ad.Tensor]:
        params = {}
        for layer in self.convs + [self.out]:
            params.update(layer.parameters())
        return params

    def __call__(self, masked: MaskedImage | ad.Tensor, bin_edges: np.ndarray) -> PerspectiveEmbedding:
        img = masked.image if isinstance(masked, MaskedImage) else masked
        H, W, _ = img.shape
        if H % self.kappa or W % self.kappa:
            raise EmbedError(f"image {H}x{W} not divisible by kappa={self.kappa}")
        if len(bin_edges) != self.depth_bins + 1:
            raise EmbedError(f"expected {self.depth_bins + 1} bin edges, got {len(bin_edges)}")
        x = ad.reshape(img, (1, H, W, 3))
        for conv in self.convs:
            x = ad.softplus(conv(x))
        y = self.out(x)
        y = ad.reshape(y, y.shape[1:])
        C = self.channels
        context = y[..., :C]
        prob = ad.softmax(y[..., C:], axis=-1)
        hf, wf = prob.shape[:2]
        e = ad.mul(ad.reshape(prob, (hf, wf, self.depth_bins, 1)), ad.reshape(context, (hf, wf, 1, C)))
        return PerspectiveEmbedding(e, prob, self.kappa, np.asarray(bin_edges, float))


class LidarEncoder:
    """3x3x3 conv then a pointwise conv; X x Y x Z extents are preserved."""

    def __init__(self, rng, channels: int = 16, hidden: int = 8, in_channels: int = 2, prefix="embed.lidar"):
        self.conv1 = Conv(f"{prefix}.conv1", (3, 3, 3), in_channels, hidden, rng)
        self.conv2 = Conv(f"{prefix}.conv2", (1, 1, 1), hidden, channels, rng)
        self.channels = channels

    def parameters(self) -> dict[str, ad.Tensor]:
        return {**self.conv1.parameters(), **self.conv2.parameters()}

    def __call__(self, voxels: MaskedVoxels | np.ndarray, cells: np.ndarray | None = None) -> ad.Tensor:
        """(X, Y, Z, C_L) embedding, or (len(cells), C_L) rows for flat cell indices."""
        feats = voxels.features if isinstance(voxels, MaskedVoxels) else np.asarray(voxels, float)
        if feats.ndim != 4:
            raise EmbedError(f"voxel features must be (X, Y, Z, F), got {feats.shape}")
        x = ad.Tensor(feats[None])
        if cells is not None:
            pos = np.stack(np.unravel_index(cells, feats.shape[:3]), axis=1)
            return self.conv2(ad.softplus(self.conv1.at(x, pos)))
        h = ad.softplus(self.conv1(x))
        out = self.conv2(h)
        return ad.reshape(out, out.shape[1:])


@dataclass
class LiftGeometry:
    """Static scatter plan from (u, v, d) cells to BEV voxels for one camera."""

    source_rows: np.ndarray  # rows of the flattened (H/k * W/k * D) cells that land in range
    target_cells: np.ndarray  # flat voxel index for each source row
    points: np.ndarray  # (H/k, W/k, D, 3) world positions of every lifted cell
    n_cells: int
    extents: tuple[int, int, int]


def lift_geometry(rig_feat: CameraRig, centers: np.ndarray, meta: GridMeta) -> LiftGeometry:
    """Place each depth-bin center along each feature-pixel ray and find its voxel."""
    origins, dirs = rig_feat.pixel_rays()
    pts = origins[:, :, None, :] + dirs[:, :, None, :] * np.asarray(centers, float)[None, None, :, None]
    flat, ok = meta.cell_index(pts.reshape(-1, 3))
    rows = np.flatnonzero(ok)
    return LiftGeometry(rows, flat[rows], pts, meta.n_cells, meta.extents)


def cam2world_lift_splat(e_per: PerspectiveEmbedding | ad.Tensor, geom: LiftGeometry, cells: np.ndarray | None = None) -> ad.Tensor:
    """Sum-pool lifted features (context x depth probability) into the BEV grid.

    With ``cells`` (sorted flat voxel indices) only those rows are produced.
    """
    t = e_per.tensor if isinstance(e_per, PerspectiveEmbedding) else e_per
    if t.shape[:3] != geom.points.shape[:3]:
        raise EmbedError(f"embedding {t.shape} does not match lift geometry {geom.points.shape[:3]}")
    C = t.shape[-1]
    flat = ad.reshape(t, (-1, C))
    if cells is None:
        bev = ad.scatter_add(ad.take(flat, geom.source_rows, axis=0), geom.target_cells, geom.n_cells)
        return ad.reshape(bev, geom.extents + (C,))
    slot = np.searchsorted(cells, geom.target_cells)
    slot = np.minimum(slot, max(len(cells) - 1, 0))
    keep = (len(cells) > 0) & (cells[slot] == geom.target_cells) if len(cells) else np.zeros(len(slot), bool)
    return ad.scatter_add(ad.take(flat, geom.source_rows[keep], axis=0), slot[keep], len(cells))


def fuse(e_cam_bev: ad.Tensor, e_lidar_bev: ad.Tensor) -> ad.Tensor:
    """Channel concatenation [camera; Lidar]."""
    if e_cam_bev.shape[:-1] != e_lidar_bev.shape[:-1]:
        raise EmbedError(f"BEV extents differ: {e_cam_bev.shape[:-1]} vs {e_lidar_bev.shape[:-1]}")
    return ad.concat([e_cam_bev, e_lidar_bev], axis=-1)


class EmbedNet:
    """The transferable parameter set: camera + Lidar encoders (lift and fusion are parameter-free)."""

    def __init__(self, rng, kappa=4, depth_bins=8, context_channels=16, lidar_channels=16, hidden=16, lidar_hidden=8):
        self.camera = CameraEncoder(rng, kappa, depth_bins, context_channels, hidden)
        self.lidar = LidarEncoder(rng, lidar_channels, lidar_hidden)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {**self.camera.parameters(), **self.lidar.parameters()}

    @property
    def fused_channels(self) -> int:
        return self.camera.channels + self.lidar.channels

    def __call__(self, masked_images, bin_edges, geoms, masked_voxels, cells=None):
        """Returns (per-view perspective embeddings, fused BEV embedding).

        With ``cells`` the fused embedding is the (len(cells), C_I + C_L) rows
        of those voxels instead of the full grid.
        """
        pers = [self.camera(m, bin_edges) for m in masked_images]
        cam_bev = None
        for e, g in zip(pers, geoms):
            lifted = cam2world_lift_splat(e, g, cells)
            cam_bev = lifted if cam_bev is None else ad.add(cam_bev, lifted)
        return pers, fuse(cam_bev, self.lidar(masked_voxels, cells))
