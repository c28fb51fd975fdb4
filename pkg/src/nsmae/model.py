"""End-to-end pre-training model: mask -> encode -> fuse -> render -> reconstruct."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import Config
from .data import Geometry, Sample
from .embed import EmbedNet, PerspectiveEmbedding
from .masking import ImageMaskSpec, MaskedImage, MaskedVoxels, init_mask_token, mask_image, mask_voxels
from .objective import LossReport, LossWeights, lp_loss, total_loss
from .render import RenderedMap, RenderHead, render_view


@dataclass
class Outputs:
    masked_images: list[MaskedImage]
    masked_voxels: MaskedVoxels
    per_embeddings: list[PerspectiveEmbedding]
    fused: ad.Tensor
    colors: list[RenderedMap]
    per_depths: list[RenderedMap]
    bev_depth: RenderedMap


def loss_weights(cfg: Config) -> LossWeights:
    return LossWeights(
        cfg["loss.lambda_color"], cfg["loss.lambda_depth_per"], cfg["loss.lambda_depth_bev"], cfg["loss.p_color"], cfg["loss.p_depth"]
    )


class NSMAE:
    def __init__(self, cfg: Config, geom: Geometry | None = None):
        self.cfg = cfg
        self.geom = geom or Geometry.from_config(cfg)
        rng = np.random.default_rng(cfg["model.seed"])
        hidden = cfg["model.hidden"]
        self.embed = EmbedNet(
            rng, cfg["model.kappa"], cfg["model.depth_bins"], cfg["model.context_channels"], cfg["model.lidar_channels"], hidden
        )
        self.per_head = RenderHead("per", cfg["model.context_channels"], hidden, 3, rng, window=3)
        self.bev_head = RenderHead("bev", self.embed.fused_channels, cfg["model.bev_hidden"], 1, rng, window=1, radiance="softplus")
        self.mask_token = init_mask_token(cfg["mask.patch_size"], rng)
        self.weights = loss_weights(cfg)

    def parameters(self) -> dict[str, ad.Tensor]:
        return {
            **self.embed.parameters(),
            **self.per_head.parameters(),
            **self.bev_head.parameters(),
            self.mask_token.name: self.mask_token,
        }

    def mask_inputs(self, sample: Sample, image_ratio: float, voxel_ratio: float, seed: int):
        s = self.cfg["mask.patch_size"]
        images = [
            mask_image(v.image, ImageMaskSpec(s, image_ratio, seed * 31 + i), self.mask_token) for i, v in enumerate(sample.views)
        ]
        voxels = mask_voxels(sample.voxels, voxel_ratio, np.random.default_rng(seed))
        return images, voxels

    def forward(self, sample: Sample, image_ratio: float = 0.0, voxel_ratio: float = 0.0, seed: int = 0, bev_rays: str = "all") -> Outputs:
        """Render every view.

        ``bev_rays="supervised"`` evaluates the BEV branch only on columns with
        a valid target; the BEV head is pointwise, so those columns come out
        exactly as in the full grid. ``bev_depth`` is then a flat (n,) map
        aligned with ``np.flatnonzero(sample.bev_valid)`` and ``fused`` holds
        only their rows.
        """
        g = self.geom
        images, voxels = self.mask_inputs(sample, image_ratio, voxel_ratio, seed)
        if bev_rays == "supervised":
            if self.bev_head.conv1.weight.shape[:3] != (1, 1, 1):
                raise ValueError("supervised-column rendering needs a pointwise BEV head")
            ids = np.flatnonzero(sample.bev_valid.ravel())
            bundle = g.bev_rays.subset(ids)
            cells = g.bev_rays.cells(ids)
        elif bev_rays == "all":
            bundle, cells = g.bev_rays, None
        else:
            raise ValueError(f"bev_rays must be 'all' or 'supervised', got {bev_rays!r}")
        pers, fused = self.embed(images, g.bin_edges, g.lifts, voxels, cells)
        colors, depths = [], []
        for e, rays in zip(pers, g.per_rays):
            vol = self.per_head(e.tensor)
            colors.append(render_view(vol, rays, "color"))
            d = render_view(vol, rays, "depth")
            depths.append(RenderedMap(ad.div(d.values, rays.deltas.sum(axis=1)[0]), d.opacity, d.view, d.kind))
        emb = fused if cells is None else ad.reshape(fused, (len(ids), 1, g.bev_rays.n_samples, fused.shape[-1]))
        bev = render_view(self.bev_head(emb), bundle, "depth")
        bev = RenderedMap(ad.div(bev.values, g.bev_rays.deltas.sum(axis=1)[0]), bev.opacity, bev.view, bev.kind)
        return Outputs(images, voxels, pers, fused, colors, depths, bev)

    def raw_losses(self, sample: Sample, out: Outputs) -> tuple[dict[str, ad.Tensor], dict[str, int]]:
        cfg = self.cfg
        k = cfg["model.kappa"]
        raw, rays = {}, {}
        color_terms, depth_terms = [], []
        n_color = n_depth = 0
        for view, m, c, d in zip(sample.views, out.masked_images, out.colors, out.per_depths):
            hf, wf = view.color_target.shape[:2]
            cvalid = np.ones((hf, wf), bool)
            if cfg["loss.on_masked_only"]:
                cvalid = m.mask.reshape(hf, k, wf, k).any(axis=(1, 3))
            dvalid = view.depth_valid & (view.lidar_mask if cfg["loss.sparse_depth"] else True)
            color_terms.append(lp_loss(c.values, view.color_target, cvalid, self.weights.p_color))
            depth_terms.append(lp_loss(d.values, view.depth_target, dvalid, self.weights.p_depth))
            n_color += int(cvalid.sum())
            n_depth += int(dvalid.sum())
        nv = len(sample.views)
        raw["color"] = color_terms[0] if nv == 1 else ad.div(_add_all(color_terms), float(nv))
        raw["depth_per"] = depth_terms[0] if nv == 1 else ad.div(_add_all(depth_terms), float(nv))
        if out.bev_depth.values.ndim == 1:
            bev_t = sample.bev_target[sample.bev_valid]
            raw["depth_bev"] = lp_loss(out.bev_depth.values, bev_t, np.ones(len(bev_t), bool), self.weights.p_depth)
        else:
            raw["depth_bev"] = lp_loss(out.bev_depth.values, sample.bev_target, sample.bev_valid, self.weights.p_depth)
        rays.update(color=n_color, depth_per=n_depth, depth_bev=int(sample.bev_valid.sum()))
        return raw, rays

    def loss(self, sample: Sample, image_ratio=0.0, voxel_ratio=0.0, seed=0, targets=None, bev_rays="supervised") -> tuple[ad.Tensor, LossReport, Outputs]:
        out = self.forward(sample, image_ratio, voxel_ratio, seed, bev_rays)
        raw, rays = self.raw_losses(sample, out)
        total, report = total_loss(raw, self.weights, targets or self.cfg["loss.targets"], rays)
        return total, report, out


def _add_all(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc
