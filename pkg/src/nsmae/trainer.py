"""Optimisation: AdamW, one-cycle schedule, pre-training loop, transfer probe."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .checkpoint import assign, load_checkpoint, save_checkpoint
from .config import Config
from .data import Geometry, Sample, make_split
from .embed import EmbedNet
from .model import NSMAE
from .objective import TARGETS, total_loss

STEP_FIELDS = ["step", "epoch", "lr", "color", "depth_per", "depth_bev", "total", "grad_norm"]
EPOCH_FIELDS = ["epoch", "color", "depth_per", "depth_bev", "total", "best_total", "improved"]


class TrainingAbort(RuntimeError):
    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


class NonFiniteGradient(TrainingAbort):
    pass


# ------------------------------------------------------------------ optimiser


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: Config) -> "OptimizerState":
        return cls(cfg["train.lr"], cfg["train.beta1"], cfg["train.beta2"], cfg["train.eps"], cfg["train.weight_decay"])


def _array(p) -> np.ndarray:
    # ndarrays have a ``.data`` memoryview of their own, so test the type
    return p if isinstance(p, np.ndarray) else p.data


def adamw_step(params: Mapping, grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """One in-place AdamW update of ``params`` (path -> Tensor or ndarray).

    Decay is decoupled: theta -= lr * wd * theta, then the bias-corrected Adam
    step. Parameters without a gradient are decayed only. Nothing is modified
    if any gradient is non-finite.
    """
    for path, g in grads.items():
        value = _array(params[path])
        if g.shape != value.shape:
            raise ValueError(f"{path}: gradient shape {g.shape} != parameter shape {value.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {path}; step aborted", {"path": path, "step": state.step})
    state.step += 1
    t = state.step
    b1, b2, lr = state.beta1, state.beta2, state.lr
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for path, p in params.items():
        theta = _array(p)
        if state.weight_decay:
            theta -= lr * state.weight_decay * theta
        g = grads.get(path)
        if g is None:
            continue
        m = state.m.get(path)
        if m is None:
            m = state.m[path] = np.zeros_like(theta)
            state.v[path] = np.zeros_like(theta)
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def one_cycle_lr(step: int, total_steps: int, max_lr: float, pct_start: float = 0.3, div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Cosine one-cycle: max_lr/div_factor -> max_lr at pct_start, then -> max_lr/final_div_factor."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    initial, final = max_lr / div_factor, max_lr / final_div_factor
    peak = pct_start * total_steps
    if step <= peak and peak > 0:
        return max_lr + (initial - max_lr) * (1 + math.cos(math.pi * step / peak)) / 2
    frac = (step - peak) / (total_steps - peak)
    return final + (max_lr - final) * (1 + math.cos(math.pi * frac)) / 2


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ------------------------------------------------------------------ evaluation


@dataclass
class EvalResult:
    raw: dict[str, float]
    total: float
    n_frames: int

    @property
    def reconstruction_error(self) -> float:
        """Unweighted color + perspective depth + BEV depth error."""
        return sum(self.raw[t] for t in TARGETS)


def mask_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def evaluate(model: NSMAE, samples: list[Sample], image_ratio: float, voxel_ratio: float, seed: int = 0, targets=None) -> EvalResult:
    """Mean loss terms over ``samples`` with deterministic per-frame masks."""
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    sums = dict.fromkeys(TARGETS, 0.0)
    total = 0.0
    enabled = targets or model.cfg["loss.targets"]
    with ad.no_grad():
        for i, s in enumerate(samples):
            out = model.forward(s, image_ratio, voxel_ratio, mask_seed(seed, 7, i), bev_rays="supervised")
            raw, rays = model.raw_losses(s, out)
            # every term is measured; only enabled ones enter the total
            for t in TARGETS:
                sums[t] += raw[t].item()
            total += total_loss(raw, model.weights, enabled, rays)[1].total
    n = len(samples)
    return EvalResult({t: v / n for t, v in sums.items()}, total / n, n)


# ------------------------------------------------------------------ pre-training


@dataclass
class PretrainResult:
    model: NSMAE
    steps: list[dict]
    epochs: list[dict]
    best_epoch: int
    best_total: float
    checkpoint_path: str | None
    stopped_early: bool
    seconds: float


def _csv_writer(path, fields):
    f = open(path, "w", newline="")
    w = csv.DictWriter(f, fieldnames=fields)
    w.writeheader()
    return f, w


def model_metadata(model: NSMAE, **extra) -> dict:
    return {"config": dict(model.cfg), "config_hash": model.cfg.digest(), **extra}


def pretrain(
    cfg: Config,
    train: list[Sample] | None = None,
    val: list[Sample] | None = None,
    out_dir: str | None = None,
    *,
    geom: Geometry | None = None,
    max_steps: int | None = None,
    renders: bool = True,
    progress: Callable[[str], None] | None = None,
) -> PretrainResult:
    """Masked pre-training with per-epoch validation and early stopping.

    The returned model holds the best-validation parameters. With ``out_dir``
    the run writes ``best.ckpt``, ``steps.csv``, ``validation.csv`` and
    sample renders under ``renders/``.
    """
    t0 = time.perf_counter()
    geom = geom or Geometry.from_config(cfg)
    train = train if train is not None else make_split(cfg, "train", geom)
    val = val if val is not None else make_split(cfg, "val", geom)
    if not train or not val:
        raise ValueError("pre-training needs at least one training and one validation scene")
    model = NSMAE(cfg, geom)
    params = model.parameters()
    state = OptimizerState.from_config(cfg)
    masked = bool(cfg["mask.enabled"])
    ir = cfg["mask.image_ratio"] if masked else 0.0
    vr = cfg["mask.voxel_ratio"] if masked else 0.0
    bs = int(cfg["train.batch_size"])
    per_epoch = math.ceil(len(train) / bs)
    total_steps = int(cfg["train.epochs"]) * per_epoch
    rng = np.random.default_rng(cfg["train.seed"])
    log = progress or (lambda msg: None)

    ckpt_path = None
    step_file = epoch_file = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt_path = os.path.join(out_dir, "best.ckpt")
        step_file, step_csv = _csv_writer(os.path.join(out_dir, "steps.csv"), STEP_FIELDS)
        epoch_file, epoch_csv = _csv_writer(os.path.join(out_dir, "validation.csv"), EPOCH_FIELDS)

    steps, epochs = [], []
    best_total, best_epoch, since_best = math.inf, 0, 0
    best_params = {k: p.data.copy() for k, p in params.items()}
    stopped = False
    step = 0
    try:
        for epoch in range(1, int(cfg["train.epochs"]) + 1):
            order = rng.permutation(len(train))
            for b in range(per_epoch):
                if max_steps is not None and step >= max_steps:
                    break
                batch = order[b * bs : (b + 1) * bs]
                state.lr = one_cycle_lr(step, total_steps, cfg["train.lr"], cfg["train.pct_start"], cfg["train.div_factor"], cfg["train.final_div_factor"])
                grads = {k: np.zeros_like(p.data) for k, p in params.items()}
                terms = dict.fromkeys(TARGETS, 0.0)
                total = 0.0
                for j in batch:
                    loss, report, _ = model.loss(train[j], ir, vr, mask_seed(cfg["train.seed"], step, j))
                    if not np.isfinite(loss.item()):
                        raise TrainingAbort(
                            f"non-finite loss at step {step}",
                            {"step": step, "epoch": epoch, "frame": int(j), "scene_seed": train[j].seed, "raw": report.raw, "lr": state.lr},
                        )
                    g = ad.backward(loss)
                    for k, p in params.items():
                        if p in g:
                            grads[k] += g[p]
                    for t, v in report.raw.items():
                        terms[t] += v / len(batch)
                    total += report.total / len(batch)
                for g in grads.values():
                    g /= len(batch)
                norm = clip_grad_norm(grads, cfg["train.clip_norm"])
                adamw_step(params, grads, state)
                row = {"step": step, "epoch": epoch, "lr": state.lr, **terms, "total": total, "grad_norm": norm}
                steps.append(row)
                if step_file:
                    step_csv.writerow(row)
                step += 1

            ev = evaluate(model, val, ir, vr, cfg["mask.seed"])
            improved = ev.total < best_total
            if improved:
                best_total, best_epoch, since_best = ev.total, epoch, 0
                best_params = {k: p.data.copy() for k, p in params.items()}
                if ckpt_path:
                    save_checkpoint(
                        ckpt_path,
                        best_params,
                        model_metadata(model, step=step, epoch=epoch, val_total=ev.total, rng_state=rng.bit_generator.state),
                    )
            else:
                since_best += 1
            rec = {"epoch": epoch, **ev.raw, "total": ev.total, "best_total": best_total, "improved": int(improved)}
            epochs.append(rec)
            if epoch_file:
                epoch_csv.writerow(rec)
                epoch_file.flush()
                step_file.flush()
            log(f"epoch {epoch:3d}  val total {ev.total:.5g}  best {best_total:.5g} (epoch {best_epoch})  lr {state.lr:.3g}")
            if out_dir and renders and _render_due(cfg, epoch):
                from .report import write_sample_renders

                write_sample_renders(model, val[0], os.path.join(out_dir, "renders"), f"epoch{epoch:03d}", ir, vr, cfg["mask.seed"])
            if since_best >= int(cfg["train.patience"]):
                stopped = True
                log(f"early stop: no improvement for {since_best} epochs")
                break
            if max_steps is not None and step >= max_steps:
                break
    except TrainingAbort as exc:
        if out_dir:
            with open(os.path.join(out_dir, "abort.json"), "w") as f:
                json.dump({"error": str(exc), **exc.dump}, f, indent=2, default=str)
        raise
    finally:
        for f in (step_file, epoch_file):
            if f:
                f.close()

    for k, p in params.items():
        p.data[...] = best_params[k]
    if out_dir and renders:
        from .report import write_sample_renders

        write_sample_renders(model, val[0], os.path.join(out_dir, "renders"), "best", ir, vr, cfg["mask.seed"])
    return PretrainResult(model, steps, epochs, best_epoch, best_total, ckpt_path, stopped, time.perf_counter() - t0)


def _render_due(cfg: Config, epoch: int) -> bool:
    every = int(cfg["train.render_every"])
    return epoch == 1 if every <= 0 else epoch % every == 0 or epoch == 1


def load_model(path, cfg: Config | None = None) -> NSMAE:
    """Rebuild a model from a checkpoint (config taken from its metadata unless given)."""
    from .config import make_config

    tensors, meta = load_checkpoint(path)
    cfg = cfg or make_config(meta.get("config", {}))
    model = NSMAE(cfg)
    assign(model.parameters(), tensors)
    return model


# ------------------------------------------------------------------ transfer probe


@dataclass
class ProbeResult:
    miou: float
    iou: tuple[float, float]  # (free, occupied)
    losses: list[float]
    n_labeled: int
    pretrained: bool


def miou(pred: np.ndarray, label: np.ndarray) -> tuple[float, tuple[float, float]]:
    """Mean IoU over the two classes (free, occupied); a class absent from both counts as 1."""
    pred, label = np.asarray(pred, bool).ravel(), np.asarray(label, bool).ravel()
    ious = []
    for cls in (False, True):
        p, l = pred == cls, label == cls
        union = np.count_nonzero(p | l)
        ious.append(1.0 if union == 0 else np.count_nonzero(p & l) / union)
    return float(np.mean(ious)), (ious[0], ious[1])


class OccupancyProbe:
    """Embedding network plus a linear head over each column's Z x C fused features."""

    def __init__(self, cfg: Config, seed: int):
        rng = np.random.default_rng(seed)
        self.embed = EmbedNet(
            rng, cfg["model.kappa"], cfg["model.depth_bins"], cfg["model.context_channels"], cfg["model.lidar_channels"], cfg["model.hidden"]
        )
        self.geom = Geometry.from_config(cfg)
        Z = self.geom.meta.extents[2]
        fan_in = Z * self.embed.fused_channels
        bound = math.sqrt(3.0 / fan_in)
        self.weight = ad.Tensor(rng.uniform(-bound, bound, (fan_in, 1)), requires_grad=True, name="probe.head.weight")
        self.bias = ad.Tensor(np.zeros(1), requires_grad=True, name="probe.head.bias")

    def parameters(self) -> dict[str, ad.Tensor]:
        return {**self.embed.parameters(), self.weight.name: self.weight, self.bias.name: self.bias}

    def logits(self, sample: Sample, columns: np.ndarray | None = None) -> ad.Tensor:
        """(X, Y) occupancy logits, or (len(columns),) for sorted flat column indices."""
        g = self.geom
        images = [ad.Tensor(v.image) for v in sample.views]
        X, Y, Z = g.meta.extents
        cells = None if columns is None else (np.asarray(columns)[:, None] * Z + np.arange(Z)).ravel()
        _, fused = self.embed(images, g.bin_edges, g.lifts, sample.voxels.features, cells)
        C = fused.shape[-1]
        if columns is None:
            return ad.reshape(ad.affine(ad.reshape(fused, (X * Y, Z * C)), self.weight, self.bias), (X, Y))
        return ad.reshape(ad.affine(ad.reshape(fused, (len(columns), Z * C)), self.weight, self.bias), (len(columns),))


def bce_with_logits(logits: ad.Tensor, labels: np.ndarray, balanced: bool = False) -> ad.Tensor:
    """Binary cross-entropy softplus(z) - y z, averaged.

    ``balanced`` weights each class to half of the total so rare occupied
    columns are not drowned out by free space.
    """
    y = np.asarray(labels, float)
    per = ad.sub(ad.softplus(logits), ad.mul(logits, y))
    if not balanced:
        return ad.mean(per)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return ad.mean(per)
    w = np.where(y > 0, 0.5 / n_pos, 0.5 / n_neg)
    return ad.sum(ad.mul(per, w))


def transfer_probe(
    cfg: Config,
    checkpoint: str | None,
    label_fraction: float,
    seed: int = 0,
    train: list[Sample] | None = None,
    test: list[Sample] | None = None,
) -> ProbeResult:
    """Fine-tune embedding + occupancy head on a labeled fraction of the training scenes; mIoU on test scenes.

    ``checkpoint=None`` trains from scratch. Training runs ``probe.epochs``
    passes over the labeled frames, so smaller fractions also get fewer
    steps. Each frame's loss is estimated on ``probe.columns`` uniformly drawn BEV
    columns; evaluation uses every column.
    """
    if not 0.0 < label_fraction <= 1.0:
        raise ValueError(f"label_fraction must lie in (0, 1], got {label_fraction}")
    probe = OccupancyProbe(cfg, seed)
    params = probe.parameters()
    if checkpoint is not None:
        tensors, _ = load_checkpoint(checkpoint)
        assign(params, tensors, prefix="embed.")
    train = train if train is not None else make_split(cfg, "train", probe.geom)
    test = test if test is not None else make_split(cfg, "test", probe.geom)
    if not train or not test:
        raise ValueError("transfer probe needs training and test scenes")
    rng = np.random.default_rng(seed)
    n_lab = max(1, int(round(label_fraction * len(train))))
    labeled = [train[i] for i in rng.permutation(len(train))[:n_lab]]
    state = OptimizerState.from_config(cfg)
    max_lr = cfg["probe.lr"] if cfg["probe.lr"] is not None else cfg["train.lr"]
    bs, n_cols = int(cfg["probe.batch_size"]), int(cfg["probe.columns"])
    batches = []
    for _ in range(int(cfg["probe.epochs"])):
        order = rng.permutation(n_lab)
        batches += [order[i : i + bs] for i in range(0, n_lab, bs)]
    steps = len(batches)
    losses = []
    for step, batch in enumerate(batches):
        state.lr = one_cycle_lr(step, steps, max_lr, cfg["train.pct_start"], cfg["train.div_factor"], cfg["train.final_div_factor"])
        grads = {k: np.zeros_like(p.data) for k, p in params.items()}
        total = 0.0
        for j in batch:
            label = labeled[j].bev_valid.ravel()
            cols = np.arange(label.size) if n_cols >= label.size else np.sort(rng.choice(label.size, n_cols, replace=False))
            loss = bce_with_logits(probe.logits(labeled[j], cols), label[cols], cfg["probe.balanced"])
            g = ad.backward(loss)
            for k, p in params.items():
                if p in g:
                    grads[k] += g[p] / len(batch)
            total += loss.item() / len(batch)
        clip_grad_norm(grads, cfg["train.clip_norm"])
        adamw_step(params, grads, state)
        losses.append(total)
    preds, labels = [], []
    thr = math.log(cfg["probe.threshold"] / (1 - cfg["probe.threshold"]))
    with ad.no_grad():
        for s in test:
            preds.append(probe.logits(s).data > thr)
            labels.append(s.bev_valid)
    m, ious = miou(np.stack(preds), np.stack(labels))
    return ProbeResult(m, ious, losses, n_lab, checkpoint is not None)
