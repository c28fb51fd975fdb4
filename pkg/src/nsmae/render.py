"""Conditional rendering heads and discrete volume compositing.

Along each ray with per-sample density sigma_i and step delta_i:

    T_i = exp(-sum_{j<i} sigma_j delta_j)
    w_i = T_i (1 - exp(-sigma_i delta_i))
    color = sum_i w_i c_i
    depth = sum_i w_i sum_{j<i} delta_j

Samples sit one per volume layer (no stochastic sampling), so the gather
indices of a ray bundle are fixed per view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nn import Conv
from .scene import CameraRig, GridMeta

DELTA_BEV = 0.2
DELTA_PER = 0.8


class RenderError(ValueError):
    pass


@dataclass
class FeatureVolume:
    sigma: ad.Tensor  # (D1, D2, D3')
    radiance: ad.Tensor  # (D1, D2, D3', A)
    view: str


@dataclass
class RayBundle:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3) unit
    deltas: np.ndarray  # (R, N)
    sample_index: np.ndarray  # (R, N) flat index into the (D1, D2, D3') volume
    positions: np.ndarray  # (R, N, 3) world-frame sample points
    view: str
    grid_shape: tuple[int, int]

    @property
    def n_rays(self) -> int:
        return self.sample_index.shape[0]

    @property
    def n_samples(self) -> int:
        return self.sample_index.shape[1]

    @property
    def ray_length(self) -> np.ndarray:
        return self.deltas.sum(axis=1)

    def subset(self, ray_ids: np.ndarray) -> "RayBundle":
        """The given rays, re-indexed against a compact (n, 1, N) volume holding only their samples.

        Sample j of the i-th kept ray reads compact cell i * N + (position of
        its source cell within that ray, in ascending cell order).
        """
        ids = np.asarray(ray_ids, dtype=np.intp)
        src = self.sample_index[ids]
        N = src.shape[1]
        rank = np.argsort(np.argsort(src, axis=1), axis=1)
        compact = np.arange(len(ids))[:, None] * N + rank
        return RayBundle(
            self.origins[ids], self.directions[ids], self.deltas[ids], compact, self.positions[ids], self.view, (len(ids),)
        )

    def cells(self, ray_ids: np.ndarray) -> np.ndarray:
        """Sorted source cells of the given rays, in the layout :meth:`subset` expects."""
        return np.sort(self.sample_index[np.asarray(ray_ids, dtype=np.intp)], axis=1).reshape(-1)


@dataclass
class RenderedMap:
    values: ad.Tensor  # (*grid_shape, A) for color, (*grid_shape,) for depth
    opacity: ad.Tensor  # (*grid_shape,)
    view: str
    kind: str


# ------------------------------------------------------------------ compositing


def _delta_tensor(delta, like: ad.Tensor) -> ad.Tensor:
    d = delta if isinstance(delta, ad.Tensor) else ad.Tensor(np.broadcast_to(np.asarray(delta, float), like.shape))
    if d.shape != like.shape:
        raise RenderError(f"delta shape {d.shape} != sigma shape {like.shape}")
    return d


def transmittance(sigma, delta) -> ad.Tensor:
    """T_i along the last axis; T_1 = 1."""
    sigma = ad._as_tensor(sigma)
    delta = _delta_tensor(delta, sigma)
    if np.any(sigma.data < 0):
        raise RenderError("negative density")
    return ad.exp(ad.neg(ad.exclusive_prefix_sum(ad.mul(sigma, delta), axis=-1)))


def weights(sigma, delta) -> ad.Tensor:
    sigma = ad._as_tensor(sigma)
    delta = _delta_tensor(delta, sigma)
    T = transmittance(sigma, delta)
    alpha = ad.sub(1.0, ad.exp(ad.neg(ad.mul(sigma, delta))))
    return ad.mul(T, alpha)


def composite_any(sigma, delta, values) -> tuple[ad.Tensor, ad.Tensor]:
    """Weighted sum of per-sample values.

    ``values`` is (..., N) or (..., N, A). Returns (composite, accumulated opacity).
    """
    sigma = ad._as_tensor(sigma)
    values = ad._as_tensor(values)
    w = weights(sigma, delta)
    if values.shape == sigma.shape:
        out = ad.sum(ad.mul(w, values), axis=-1)
    elif values.shape[:-1] == sigma.shape:
        out = ad.sum(ad.mul(ad.reshape(w, w.shape + (1,)), values), axis=-2)
    else:
        raise RenderError(f"values shape {values.shape} incompatible with sigma {sigma.shape}")
    return out, ad.sum(w, axis=-1)


def composite_color(sigma, delta, color) -> tuple[ad.Tensor, ad.Tensor]:
    return composite_any(sigma, delta, color)


def accumulated_distance(delta) -> np.ndarray:
    d = np.asarray(delta, float)
    out = np.zeros_like(d)
    np.cumsum(d[..., :-1], axis=-1, out=out[..., 1:])
    return out


def composite_depth(sigma, delta) -> tuple[ad.Tensor, ad.Tensor]:
    sigma = ad._as_tensor(sigma)
    d = delta.data if isinstance(delta, ad.Tensor) else np.broadcast_to(np.asarray(delta, float), sigma.shape)
    if isinstance(delta, ad.Tensor) and delta.requires_grad:
        dist = ad.exclusive_prefix_sum(delta, axis=-1)
    else:
        dist = accumulated_distance(d)
    return composite_any(sigma, delta, dist)


# ------------------------------------------------------------------ ray bundles


def build_rays_bev(meta: GridMeta, delta: float = DELTA_BEV) -> RayBundle:
    """One ray per (x, y) column, pointing down from z_max through the layer centers."""
    X, Y, Z = meta.extents
    if delta <= 0:
        raise RenderError("delta must be positive")
    vs = meta.voxel_size
    xs = meta.lo[0] + (np.arange(X) + 0.5) * vs[0]
    ys = meta.lo[1] + (np.arange(Y) + 0.5) * vs[1]
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    z_top = meta.lo[2] + Z * vs[2]
    origins = np.stack([gx.ravel(), gy.ravel(), np.full(X * Y, z_top)], axis=1)
    directions = np.tile([0.0, 0.0, -1.0], (X * Y, 1))
    layers = np.arange(Z - 1, -1, -1)
    ii, jj = np.meshgrid(np.arange(X), np.arange(Y), indexing="ij")
    col = (ii.ravel() * Y + jj.ravel()) * Z
    sample_index = col[:, None] + layers[None, :]
    zc = meta.lo[2] + (layers + 0.5) * vs[2]
    positions = np.concatenate(
        [np.repeat(origins[:, None, :2], Z, axis=1), np.broadcast_to(zc, (X * Y, Z))[..., None]], axis=2
    )
    return RayBundle(origins, directions, np.full((X * Y, Z), float(delta)), sample_index, positions, "bev", (X, Y))


def build_rays_perspective(rig: CameraRig, bin_centers: np.ndarray, delta: float = DELTA_PER) -> RayBundle:
    """One ray per feature-resolution pixel; samples at the depth-bin centers.

    ``rig`` must already be at the feature resolution (see CameraRig.scaled).
    """
    if delta <= 0:
        raise RenderError("delta must be positive")
    bins = np.asarray(bin_centers, float)
    H, W, D = rig.height, rig.width, len(bins)
    origins, dirs = rig.pixel_rays()
    origins = np.ascontiguousarray(origins).reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)
    sample_index = np.arange(H * W)[:, None] * D + np.arange(D)[None, :]
    positions = origins[:, None, :] + dirs[:, None, :] * bins[None, :, None]
    return RayBundle(origins, dirs, np.full((H * W, D), float(delta)), sample_index, positions, "per", (H, W))


def render_view(volume: FeatureVolume, bundle: RayBundle, kind: str) -> RenderedMap:
    """Gather per-ray samples from the volume and composite onto the view grid."""
    if volume.view != bundle.view:
        raise RenderError(f"volume view {volume.view!r} != ray view {bundle.view!r}")
    n_cells = volume.sigma.size
    if volume.sigma.shape[2] != bundle.n_samples or bundle.sample_index.max() >= n_cells:
        raise RenderError(f"ray layout {bundle.sample_index.shape} does not match volume {volume.sigma.shape}")
    sigma = ad.take(ad.reshape(volume.sigma, (-1,)), bundle.sample_index)
    gs = bundle.grid_shape
    if kind == "depth":
        vals, opac = composite_depth(sigma, bundle.deltas)
        vals = ad.reshape(vals, gs)
    elif kind in ("color", "any"):
        A = volume.radiance.shape[-1]
        rad = ad.take(ad.reshape(volume.radiance, (-1, A)), bundle.sample_index, axis=0)
        vals, opac = composite_any(sigma, bundle.deltas, rad)
        vals = ad.reshape(vals, gs + (A,))
    else:
        raise RenderError(f"unknown render target {kind!r}")
    return RenderedMap(vals, ad.reshape(opac, gs), bundle.view, kind)


# ------------------------------------------------------------------ render heads


class RenderHead:
    """f(x, omega, e) -> (sigma, radiance) for one view.

    A spatial conv followed by a pointwise conv to 1 + A channels; sigma uses
    softplus, color radiance sigmoid, other modalities softplus.
    """

    def __init__(self, view: str, in_channels: int, hidden: int, n_radiance: int, rng, window: int = 3, radiance="sigmoid"):
        if view not in ("per", "bev"):
            raise RenderError(f"unknown view {view!r}")
        self.view = view
        self.radiance_act = radiance
        prefix = f"render.{view}"
        self.conv1 = Conv(f"{prefix}.conv1", (window,) * 3, in_channels, hidden, rng)
        self.conv2 = Conv(f"{prefix}.conv2", (1, 1, 1), hidden, 1 + n_radiance, rng)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {**self.conv1.parameters(), **self.conv2.parameters()}

    def zero_(self) -> None:
        for p in self.parameters().values():
            p.data[...] = 0.0

    def __call__(self, embedding: ad.Tensor) -> FeatureVolume:
        if embedding.ndim != 4:
            raise RenderError(f"embedding must be (D1, D2, D3, C), got {embedding.shape}")
        x = ad.reshape(embedding, (1,) + embedding.shape)
        h = ad.softplus(self.conv1(x))
        out = self.conv2(h)
        out = ad.reshape(out, out.shape[1:])
        sigma = ad.softplus(out[..., 0])
        raw = out[..., 1:]
        radiance = ad.sigmoid(raw) if self.radiance_act == "sigmoid" else ad.softplus(raw)
        return FeatureVolume(sigma, radiance, self.view)
