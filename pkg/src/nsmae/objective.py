"""Reconstruction objectives: masked L_p per target and their weighted sum."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

TARGETS = ("color", "depth_per", "depth_bev")

# Number of lp_loss calls that found no valid ray.
empty_support_count = 0


class ObjectiveError(ValueError):
    pass


@dataclass
class LossWeights:
    color: float = 1e4
    depth_per: float = 1e-2
    depth_bev: float = 1e-2
    p_color: float = 2.0
    p_depth: float = 1.0

    def __post_init__(self):
        if min(self.color, self.depth_per, self.depth_bev) < 0:
            raise ObjectiveError("loss coefficients must be non-negative")
        if min(self.p_color, self.p_depth) < 1:
            raise ObjectiveError("p must be >= 1")

    def coefficient(self, target: str) -> float:
        return getattr(self, target)

    def p(self, target: str) -> float:
        return self.p_color if target == "color" else self.p_depth


@dataclass
class LossReport:
    raw: dict[str, float] = field(default_factory=dict)
    weighted: dict[str, float] = field(default_factory=dict)
    rays: dict[str, int] = field(default_factory=dict)
    total: float = 0.0


def lp_loss(rendered, target, valid=None, p: float = 2.0) -> ad.Tensor:
    """(1/|S|) * sum over valid rays of sum over channels |rendered - target|^p."""
    global empty_support_count
    rendered = ad._as_tensor(rendered)
    tgt = np.asarray(target.data if isinstance(target, ad.Tensor) else target, float)
    if rendered.shape != tgt.shape:
        raise ObjectiveError(f"rendered {rendered.shape} vs target {tgt.shape}")
    ray_shape = rendered.shape if valid is None else np.shape(valid)
    valid = np.ones(ray_shape, bool) if valid is None else np.asarray(valid, bool)
    if rendered.shape[: valid.ndim] != valid.shape:
        raise ObjectiveError(f"validity mask {valid.shape} does not match {rendered.shape}")
    n = int(valid.sum())
    if n == 0:
        empty_support_count += 1
        warnings.warn("lp_loss: no valid rays; loss defined as 0", RuntimeWarning, stacklevel=2)
        return ad.mul(ad.sum(rendered), 0.0)
    diff = ad.sub(rendered, tgt)
    err = ad.power(diff, 2) if p == 2 else ad.power(ad.absolute(diff), p)
    mask = valid.reshape(valid.shape + (1,) * (rendered.ndim - valid.ndim)).astype(float)
    return ad.div(ad.sum(ad.mul(err, mask)), float(n))


def total_loss(raw: dict[str, ad.Tensor], weights: LossWeights, enabled=TARGETS, rays: dict | None = None):
    """Sum of lambda_k * L_k over enabled targets; returns (scalar tensor, LossReport)."""
    enabled = [t for t in TARGETS if t in enabled]
    if not enabled:
        raise ObjectiveError("at least one reconstruction target must be enabled")
    missing = [t for t in enabled if t not in raw]
    if missing:
        raise ObjectiveError(f"no raw loss for enabled targets {missing}")
    report = LossReport(rays=dict(rays or {}))
    total = None
    for t in enabled:
        term = ad.mul(raw[t], weights.coefficient(t))
        report.raw[t] = raw[t].item()
        report.weighted[t] = term.item()
        total = term if total is None else ad.add(total, term)
    report.total = total.item()
    return total, report
