"""Modality-specific input corruption: patch masking for images, voxel masking for Lidar."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .scene import VoxelGrid


class MaskConfigError(ValueError):
    pass


def _exact_count(ratio: float, n: int) -> int:
    # round half up; Python's round() is banker's rounding
    return int(np.floor(ratio * n + 0.5))


@dataclass(frozen=True)
class ImageMaskSpec:
    patch_size: int
    ratio: float
    seed: int = 0

    def validate(self, height: int, width: int) -> None:
        if not 0.0 <= self.ratio <= 1.0:
            raise MaskConfigError(f"mask ratio {self.ratio} outside [0, 1]")
        s = self.patch_size
        if s < 1 or height % s or width % s:
            raise MaskConfigError(f"image {height}x{width} not divisible into {s}x{s} patches")


@dataclass
class MaskedImage:
    image: ad.Tensor  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool, True = replaced by the token
    mask_token: ad.Tensor  # (s, s, 3)


def init_mask_token(patch_size: int, rng: np.random.Generator) -> ad.Tensor:
    return ad.Tensor(rng.uniform(-0.02, 0.02, size=(patch_size, patch_size, 3)), requires_grad=True, name="mask.image_token")


def patch_mask(height: int, width: int, spec: ImageMaskSpec) -> np.ndarray:
    spec.validate(height, width)
    s = spec.patch_size
    gh, gw = height // s, width // s
    n = gh * gw
    chosen = np.random.default_rng(spec.seed).permutation(n)[: _exact_count(spec.ratio, n)]
    grid = np.zeros(n, dtype=bool)
    grid[chosen] = True
    return np.repeat(np.repeat(grid.reshape(gh, gw), s, axis=0), s, axis=1)


def mask_image(image, spec: ImageMaskSpec, mask_token: ad.Tensor) -> MaskedImage:
    img = image if isinstance(image, ad.Tensor) else ad.Tensor(image)
    h, w, _ = img.shape
    s = spec.patch_size
    if mask_token.shape != (s, s, 3):
        raise MaskConfigError(f"mask token shape {mask_token.shape} != {(s, s, 3)}")
    mask = patch_mask(h, w, spec)
    # tile the s x s token over the whole image, then select per pixel
    tiled = ad.reshape(ad.mul(ad.reshape(mask_token, (1, s, 1, s, 3)), np.ones((h // s, 1, w // s, 1, 1))), (h, w, 3))
    out = ad.where(mask[:, :, None], tiled, img)
    return MaskedImage(out, mask, mask_token)


@dataclass
class MaskedVoxels:
    grid: VoxelGrid  # features of masked cells zeroed
    masked_index: np.ndarray  # flat indices of masked cells

    @property
    def features(self) -> np.ndarray:
        return self.grid.features


def mask_voxels(grid: VoxelGrid, ratio: float, rng: np.random.Generator) -> MaskedVoxels:
    if not 0.0 <= ratio <= 1.0:
        raise MaskConfigError(f"mask ratio {ratio} outside [0, 1]")
    nonempty = np.flatnonzero(grid.occupied.reshape(-1))
    k = _exact_count(ratio, len(nonempty))
    chosen = np.sort(rng.choice(nonempty, size=k, replace=False)) if k else np.zeros(0, np.int64)
    feats = grid.features.copy()
    flat = feats.reshape(-1, feats.shape[-1])
    flat[chosen] = 0.0
    return MaskedVoxels(VoxelGrid(grid.meta, feats, grid.counts), chosen)
