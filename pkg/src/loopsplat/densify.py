"""Adaptive density control and sparse-friendly sampling.

Mutations return ``(cloud, source)``: ``source[i]`` is the index in the old
cloud that new Gaussian ``i`` continues, or -1 for a freshly created one.
The trainer uses it to carry optimizer state across the change.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import GaussianCloud, quat_to_rotmat


@dataclass
class DensifyConfig:
    start_iter: int = 1000
    interval: int = 200
    grad_threshold: float = 0.0005
    prune_opacity: float = 0.005
    split_scale_percentile: float = 0.01
    sfs_interval: int = 500
    sfs_start: int = 2000
    sfs_top_fraction: float = 0.01
    sfs_m: int = 2
    split_shrink: float = 1.6
    stop_fraction: float = 0.8
    enabled: bool = True
    sfs_enabled: bool = True

    def __post_init__(self):
        for f in ("start_iter", "interval", "sfs_interval", "sfs_start"):
            if getattr(self, f) <= 0:
                raise ValueError(f"densify.{f} must be positive")
        for f in ("grad_threshold", "prune_opacity", "split_scale_percentile", "split_shrink"):
            if getattr(self, f) <= 0:
                raise ValueError(f"densify.{f} must be positive")
        if not 0 < self.sfs_top_fraction <= 1:
            raise ValueError("densify.sfs_top_fraction must be in (0, 1]")
        if self.sfs_m < 2:
            raise ValueError("densify.sfs_m must be >= 2")


def split_children(cloud: GaussianCloud, idx: np.ndarray, m: int, shrink: float,
                   rng: np.random.Generator) -> GaussianCloud:
    """``m`` children per listed Gaussian, centers drawn from its density."""
    idx = np.asarray(idx, dtype=np.int64)
    parents = cloud.take(np.repeat(idx, m))
    if len(idx) == 0:
        return parents
    s = np.exp(parents.raw_scale)
    z = rng.normal(size=(len(parents), 3)) * s
    offsets = np.einsum("nij,nj->ni", quat_to_rotmat(parents.rotation_q), z)
    parents.mu = parents.mu + offsets
    parents.raw_scale = parents.raw_scale - np.log(shrink)
    return parents


def _apply(cloud: GaussianCloud, keep: np.ndarray, extra: GaussianCloud) -> tuple:
    kept = np.flatnonzero(keep)
    out = cloud.take(kept).concat(extra)
    source = np.concatenate([kept, np.full(len(extra), -1, dtype=np.int64)])
    return out, source


def sfs_split(cloud: GaussianCloud, indices, m: int = 2, split_shrink: float = 1.6,
              rng: np.random.Generator | None = None) -> tuple:
    idx = np.unique(np.asarray(list(indices), dtype=np.int64))
    if len(idx) and (idx.min() < 0 or idx.max() >= len(cloud)):
        raise IndexError("split index out of range")
    rng = rng or np.random.default_rng(0)
    keep = np.ones(len(cloud), dtype=bool)
    keep[idx] = False
    return _apply(cloud, keep, split_children(cloud, idx, m, split_shrink, rng))


def prune(cloud: GaussianCloud, min_opacity: float) -> tuple:
    keep = cloud.opacity >= min_opacity
    return _apply(cloud, keep, GaussianCloud())


def adc_step(cloud: GaussianCloud, mean_grad: np.ndarray, cfg: DensifyConfig,
             scene_extent: float, rng: np.random.Generator | None = None) -> tuple:
    """Clone small / split large high-gradient Gaussians, then prune."""
    rng = rng or np.random.default_rng(0)
    mean_grad = np.asarray(mean_grad, dtype=np.float64).reshape(-1)
    if len(mean_grad) != len(cloud):
        raise ValueError("gradient statistics do not cover the cloud")
    hot = mean_grad >= cfg.grad_threshold
    big = cloud.scale.max(axis=1) >= cfg.split_scale_percentile * scene_extent \
        if len(cloud) else np.zeros(0, bool)
    clone_idx = np.flatnonzero(hot & ~big)
    split_idx = np.flatnonzero(hot & big)
    keep = np.ones(len(cloud), dtype=bool)
    keep[split_idx] = False
    children = split_children(cloud, split_idx, 2, cfg.split_shrink, rng)
    extra = cloud.take(clone_idx).concat(children)
    grown, source = _apply(cloud, keep, extra)
    pruned, src2 = prune(grown, cfg.prune_opacity)
    return pruned, np.where(src2 >= 0, source[np.maximum(src2, 0)], -1)


def sfs_select(renders: Sequence, gts: Sequence, rho: float = 0.01,
               min_error: float = 1e-8) -> set:
    """Max-weight Gaussians behind the worst pixels, pooled over views.

    Pixels are ranked by squared RGB error; ties go to the lower pixel
    index, then the lower view index.
    """
    errs, pix, view, owner = [], [], [], []
    for v, (out, gt) in enumerate(zip(renders, gts)):
        e = np.sum((out.color - np.asarray(gt, float)) ** 2, axis=-1).ravel()
        errs.append(e)
        pix.append(np.arange(e.size))
        view.append(np.full(e.size, v))
        owner.append(out.max_weight_index.ravel())
    if not errs:
        return set()
    e, p, v, o = (np.concatenate(a) for a in (errs, pix, view, owner))
    k = int(np.ceil(rho * e.size))
    order = np.lexsort((v, p, -e))[:k]
    chosen = order[(e[order] > min_error) & (o[order] >= 0)]
    return {int(i) for i in o[chosen]}

