import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsmae import autodiff as ad
from nsmae.masking import ImageMaskSpec, MaskConfigError, init_mask_token, mask_image, mask_voxels, patch_mask
from nsmae.scene import GridMeta, voxelize


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([(8, 16, 4), (16, 32, 4), (12, 12, 3), (8, 8, 8)]), st.floats(0, 1), st.integers(0, 2**31))
def test_patch_mask_exact_count_and_patch_aligned(dims, ratio, seed):
    h, w, s = dims
    m = patch_mask(h, w, ImageMaskSpec(s, ratio, seed))
    blocks = m.reshape(h // s, s, w // s, s)
    # each patch is all-masked or all-visible
    assert np.all(blocks.all(axis=(1, 3)) == blocks.any(axis=(1, 3)))
    n = (h // s) * (w // s)
    assert blocks.any(axis=(1, 3)).sum() == math.floor(ratio * n + 0.5)
    np.testing.assert_array_equal(m, patch_mask(h, w, ImageMaskSpec(s, ratio, seed)))


def test_extreme_ratios():
    assert not patch_mask(8, 8, ImageMaskSpec(4, 0.0, 1)).any()
    assert patch_mask(8, 8, ImageMaskSpec(4, 1.0, 1)).all()


def test_mask_image_places_token_tiles(rng):
    img = rng.uniform(0, 1, (8, 12, 3))
    token = init_mask_token(4, rng)
    out = mask_image(img, ImageMaskSpec(4, 0.5, 3), token)
    m = out.mask
    np.testing.assert_array_equal(out.image.data[~m], img[~m])
    for i in range(0, 8, 4):
        for j in range(0, 12, 4):
            if m[i, j]:
                np.testing.assert_array_equal(out.image.data[i : i + 4, j : j + 4], token.data)


def test_mask_token_gradient_sums_over_masked_patches(rng):
    img = rng.uniform(0, 1, (8, 8, 3))
    token = init_mask_token(4, rng)
    out = mask_image(img, ImageMaskSpec(4, 0.5, 0), token)
    g = ad.backward(ad.sum(out.image))
    np.testing.assert_array_equal(g[token], np.full((4, 4, 3), 2.0))  # two of four patches masked


def test_mask_config_errors(rng):
    with pytest.raises(MaskConfigError):
        patch_mask(10, 8, ImageMaskSpec(4, 0.5))
    with pytest.raises(MaskConfigError):
        patch_mask(8, 8, ImageMaskSpec(4, 1.5))
    with pytest.raises(MaskConfigError):
        mask_image(np.zeros((8, 8, 3)), ImageMaskSpec(4, 0.5), init_mask_token(2, rng))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_voxel_mask_zeroes_exact_count_of_nonempty_cells(ratio, seed):
    pts = np.random.default_rng(seed).uniform([0, 0, 0, 0], [4, 4, 2, 1], size=(60, 4))
    grid = voxelize(pts, GridMeta((0, 0, 0), (4, 4, 2), 0.5), None)
    n = int(grid.occupied.sum())
    mv = mask_voxels(grid, ratio, np.random.default_rng(seed))
    k = math.floor(ratio * n + 0.5)
    assert len(mv.masked_index) == k == len(set(mv.masked_index.tolist()))
    flat_occ = grid.occupied.reshape(-1)
    assert flat_occ[mv.masked_index].all()
    feats = mv.features.reshape(-1, 2)
    assert np.all(feats[mv.masked_index] == 0)
    keep = np.setdiff1d(np.arange(flat_occ.size), mv.masked_index)
    np.testing.assert_array_equal(feats[keep], grid.features.reshape(-1, 2)[keep])
    # the input grid is untouched
    assert grid.features[..., 0].sum() == n


def test_voxel_mask_ratio_validated():
    grid = voxelize(np.zeros((0, 4)), GridMeta((0, 0, 0), (1, 1, 1), 0.5), None)
    with pytest.raises(MaskConfigError):
        mask_voxels(grid, -0.1, np.random.default_rng(0))
