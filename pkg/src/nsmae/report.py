"""Render dumps (PPM/PGM) and matplotlib figures for runs."""

from __future__ import annotations

import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import autodiff as ad  # noqa: E402
from .imageio import write_ppm, write_pgm  # noqa: E402


@dataclass
class FrameRender:
    masked_input: np.ndarray  # (H, W, 3)
    color: np.ndarray  # (H/k, W/k, 3)
    color_gt: np.ndarray
    depth_per: np.ndarray  # metres
    depth_per_gt: np.ndarray  # metres, 0 where no hit
    depth_bev: np.ndarray  # metres below the grid top
    depth_bev_gt: np.ndarray
    errors: dict[str, float]


def render_frame(model, sample, image_ratio: float, voxel_ratio: float, seed: int = 0, view: int = 0) -> FrameRender:
    """Run the model on one frame (full BEV grid) and convert renders back to metres."""
    from .trainer import mask_seed

    g = model.geom
    s = mask_seed(seed, 7, 0)
    with ad.no_grad():
        out = model.forward(sample, image_ratio, voxel_ratio, s, bev_rays="all")
        raw, _ = model.raw_losses(sample, out)
    near, far = g.depth_span
    v = sample.views[view]
    return FrameRender(
        masked_input=np.clip(out.masked_images[view].image.data, 0, 1),
        color=out.colors[view].values.data,
        color_gt=v.color_target,
        depth_per=near + out.per_depths[view].values.data * (far - near),
        depth_per_gt=v.depth_target_m,
        depth_bev=out.bev_depth.values.data * g.z_span,
        depth_bev_gt=sample.bev_depth_m,
        errors={k: t.item() for k, t in raw.items()},
    )


def _upsample(a: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(np.repeat(a, k, axis=0), k, axis=1)


def write_frame_render(r: FrameRender, directory: str, tag: str) -> dict[str, str]:
    """Individual files plus side-by-side triptychs (input | render | truth, render | truth | |error|)."""
    os.makedirs(directory, exist_ok=True)
    k = r.masked_input.shape[0] // r.color.shape[0]
    paths = {}

    def put(name, writer, arr):
        path = os.path.join(directory, f"{tag}_{name}")
        writer(path, arr)
        paths[name] = path

    put("masked_input.ppm", write_ppm, r.masked_input)
    put("color.ppm", write_ppm, r.color)
    put("color_gt.ppm", write_ppm, r.color_gt)
    put("depth_per.pgm", write_pgm, r.depth_per)
    put("depth_per_gt.pgm", write_pgm, r.depth_per_gt)
    put("depth_bev.pgm", write_pgm, r.depth_bev)
    put("depth_bev_gt.pgm", write_pgm, r.depth_bev_gt)
    put("color_triptych.ppm", write_ppm, np.concatenate([r.masked_input, _upsample(r.color, k), _upsample(r.color_gt, k)], axis=1))
    hit = r.depth_per_gt > 0
    per_err = np.where(hit, np.abs(r.depth_per - r.depth_per_gt), 0.0)
    put("depth_per_triptych.pgm", write_pgm, np.concatenate([r.depth_per, r.depth_per_gt, per_err], axis=1))
    bev_err = np.where(r.depth_bev_gt > 0, np.abs(r.depth_bev - r.depth_bev_gt), 0.0)
    put("depth_bev_triptych.pgm", write_pgm, np.concatenate([r.depth_bev, r.depth_bev_gt, bev_err], axis=1))
    return paths


def write_sample_renders(model, sample, directory, tag, image_ratio, voxel_ratio, seed=0) -> FrameRender:
    r = render_frame(model, sample, image_ratio, voxel_ratio, seed)
    write_frame_render(r, directory, tag)
    return r


# ------------------------------------------------------------------ figures


def plot_frame(r: FrameRender, path: str, title: str | None = None) -> None:
    fig, axes = plt.subplots(3, 3, figsize=(10, 6.5))
    panels = [
        (r.masked_input, "masked input", None),
        (r.color, "rendered color", None),
        (r.color_gt, "true color", None),
        (r.depth_per, "rendered depth (PER)", "viridis"),
        (r.depth_per_gt, "true depth (PER)", "viridis"),
        (np.abs(r.depth_per - r.depth_per_gt) * (r.depth_per_gt > 0), "|error| (PER)", "magma"),
        (r.depth_bev, "rendered depth (BEV)", "viridis"),
        (r.depth_bev_gt, "true depth (BEV)", "viridis"),
        (np.abs(r.depth_bev - r.depth_bev_gt) * (r.depth_bev_gt > 0), "|error| (BEV)", "magma"),
    ]
    for ax, (img, name, cmap) in zip(axes.ravel(), panels):
        ax.imshow(np.clip(img, 0, 1) if cmap is None else img, cmap=cmap, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_training(steps: list[dict], epochs: list[dict], path: str) -> None:
    """Per-term training loss (log scale) and validation total per epoch."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(11, 4))
    x = [r["step"] for r in steps]
    for key in ("color", "depth_per", "depth_bev"):
        a.semilogy(x, [max(float(r[key]), 1e-12) for r in steps], label=key, lw=1)
    a.set_xlabel("step")
    a.set_ylabel("raw loss")
    a.legend()
    ep = [r["epoch"] for r in epochs]
    b.plot(ep, [float(r["total"]) for r in epochs], "o-", label="validation total")
    b.plot(ep, [float(r["best_total"]) for r in epochs], "--", label="best so far")
    b.set_xlabel("epoch")
    b.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_ablation(rows: list[dict], path: str) -> None:
    """Grouped bars of held-out reconstruction terms per ablation setting."""
    names = [r["setting"] for r in rows]
    keys = ["color", "depth_per", "depth_bev"]
    x = np.arange(len(rows))
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    for ax, key in zip(axes, keys):
        ax.bar(x, [float(r[key]) for r in rows], color=["C0" if r["masking"] in ("on", 1, True) else "C1" for r in rows])
        ax.set_xticks(x, names, rotation=45, ha="right", fontsize=8)
        ax.set_title(f"test {key}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_transfer(rows: list[dict], path: str) -> None:
    fracs = sorted({float(r["fraction"]) for r in rows})
    fig, ax = plt.subplots(figsize=(5, 4))
    for arm in ("pretrained", "scratch"):
        means = [np.mean([float(r[arm]) for r in rows if float(r["fraction"]) == f]) for f in fracs]
        ax.plot(fracs, means, "o-", label=arm)
    ax.set_xscale("log")
    ax.set_xlabel("label fraction")
    ax.set_ylabel("occupancy mIoU")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
