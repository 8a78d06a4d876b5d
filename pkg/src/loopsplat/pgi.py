"""Progressive initialization: pseudo cameras around the training rig and
the render -> SfM -> filter -> re-initialize -> train loop."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rasterizer
from .core import Camera, CameraPose, GaussianCloud, camera_bbox, quat_nlerp_midpoint
from .imageio import write_pfm, write_ppm
from .sfm import (SfmModel, SfmView, filter_match_error, filter_pseudo_only,
                  init_gaussians_from_points, project_sparse_depth, validate_model)
from .trainer import View, write_checkpoint, write_metric_log

log = logging.getLogger(__name__)


@dataclass
class PgiConfig:
    loops: int = 3
    pseudo_per_view: int = 4
    epsilon: float = 0.02
    delta: float = 0.1
    iterations_per_loop: int = 10000
    seed: int = 0
    warm_start: bool = False

    def __post_init__(self):
        if self.loops < 0:
            raise ValueError("pgi.loops must be >= 0")
        if self.pseudo_per_view < 1:
            raise ValueError("pgi.pseudo_per_view must be >= 1")
        if self.epsilon < 0 or self.delta < 0:
            raise ValueError("pgi.epsilon and pgi.delta must be >= 0")


def noise_sigma(cfg: PgiConfig, loop: int) -> float:
    return cfg.epsilon + cfg.delta * loop


def gen_pseudo_cameras(training_cams: Sequence[Camera], loop: int, cfg: PgiConfig) -> list[Camera]:
    """``pseudo_per_view`` jittered cameras per training camera.

    Centers get isotropic noise of std ``epsilon + delta * loop`` and are
    clamped to the training cameras' bounding box; orientation is the
    midpoint of the two training cameras nearest the new center.
    """
    centers = np.stack([c.pose.center for c in training_cams])
    lo, hi = camera_bbox(centers)
    sigma = noise_sigma(cfg, loop)
    out = []
    for j, cam in enumerate(training_cams):
        for i in range(cfg.pseudo_per_view):
            rng = np.random.default_rng([cfg.seed, loop, j, i])
            c = cam.pose.center + rng.normal(0.0, 1.0, 3) * sigma
            c = np.clip(c, lo, hi)
            if len(training_cams) == 1:
                q = cam.pose.rotation.copy()
            else:
                near = np.argsort(np.linalg.norm(centers - c, axis=1), kind="stable")[:2]
                q = quat_nlerp_midpoint(training_cams[near[0]].pose.rotation,
                                        training_cams[near[1]].pose.rotation)
            out.append(Camera(cam.intrinsics, CameraPose(q, c), f"pseudo_l{loop}_v{j:02d}_{i}"))
    return out


@dataclass
class PseudoView:
    camera: Camera
    image: np.ndarray
    mono_depth: np.ndarray
    mono_is_inverse: bool
    sparse_depth: np.ndarray | None = None


@dataclass
class LoopState:
    loop_index: int = 0
    accumulated_pseudo: list = field(default_factory=list)
    cloud: GaussianCloud | None = None
    training_sparse: dict = field(default_factory=dict)
    point_counts: list = field(default_factory=list)
    metrics: list = field(default_factory=list)


def sparse_maps(model: SfmModel, names: Sequence[str]) -> dict:
    """Filtered sparse depth per image name (Filters 1 and 3 applied)."""
    eligible = filter_match_error(model)
    out = {}
    for name in names:
        out[name] = project_sparse_depth(model, model.image_id_by_name(name), eligible)
    return out


def prepare(model: SfmModel):
    """Filter 2 on the model, then the initialization cloud from survivors."""
    model = filter_pseudo_only(validate_model(model))
    cloud = init_gaussians_from_points(list(model.points.values()))
    return model, cloud


def run_pgi(initial_model: SfmModel, training_views: Sequence[View], sfm_provider,
            mono_provider, train_fn: Callable, cfg: PgiConfig, out_dir=None,
            background=(0.0, 0.0, 0.0)) -> tuple[GaussianCloud, LoopState]:
    """Run loop 0 plus ``cfg.loops`` progressive-initialization loops.

    ``train_fn(cloud, views, loop_index)`` returns ``(cloud, metric_log)``.
    """
    state = LoopState()
    train_views = list(training_views)
    names = [v.name for v in train_views]

    model, cloud = prepare(initial_model)
    state.training_sparse = sparse_maps(model, names)
    state.point_counts.append(len(model.points))
    views = [_with_sparse(v, state.training_sparse[v.name]) for v in train_views]
    cloud, mlog = train_fn(cloud, views, 0)
    state.cloud = cloud
    state.metrics.append({"loop": 0, "points": len(model.points), "gaussians": len(cloud),
                          "final": mlog[-1] if mlog else None})
    _dump(out_dir, 0, state, cloud, mlog, [])

    for loop in range(1, cfg.loops + 1):
        state.loop_index = loop
        new = []
        try:
            for cam in gen_pseudo_cameras([v.camera for v in train_views], loop, cfg):
                img = rasterizer.render(cloud, cam, background).color
                mono, inv = mono_provider.estimate(cam, img)
                new.append(PseudoView(cam, img, mono, inv))
            state.accumulated_pseudo.extend(new)
            sfm_views = [SfmView(v.name, v.camera, False, v.image) for v in train_views]
            sfm_views += [SfmView(p.camera.name, p.camera, True, p.image)
                          for p in state.accumulated_pseudo]
            model, fresh = prepare(sfm_provider.run(sfm_views))
        except Exception as e:
            raise RuntimeError(f"loop {loop}: {e}") from e
        pseudo_names = [p.camera.name for p in state.accumulated_pseudo]
        maps = sparse_maps(model, names + pseudo_names)
        state.training_sparse = {n: maps[n] for n in names}
        for p in state.accumulated_pseudo:
            p.sparse_depth = maps[p.camera.name]
        state.point_counts.append(len(model.points))
        if not cfg.warm_start:
            cloud = fresh
        views = [_with_sparse(v, maps[v.name]) for v in train_views]
        views += [View(p.camera, "pseudo", None, p.sparse_depth, p.mono_depth, p.mono_is_inverse)
                  for p in state.accumulated_pseudo]
        cloud, mlog = train_fn(cloud, views, loop)
        state.cloud = cloud
        state.metrics.append({"loop": loop, "points": len(model.points),
                              "gaussians": len(cloud), "final": mlog[-1] if mlog else None})
        log.info("loop %d: %d points, %d Gaussians", loop, len(model.points), len(cloud))
        _dump(out_dir, loop, state, cloud, mlog, new)
    return cloud, state


def _with_sparse(v: View, sparse: np.ndarray) -> View:
    return View(v.camera, v.kind, v.image, sparse, v.mono_depth, v.mono_is_inverse)


def _dump(out_dir, loop: int, state: LoopState, cloud: GaussianCloud, mlog, new) -> None:
    if out_dir is None:
        return
    root = Path(out_dir)
    d = root / f"loop_{loop}"
    d.mkdir(parents=True, exist_ok=True)
    for p in new:
        write_ppm(d / f"{p.camera.name}.ppm", p.image)
        write_pfm(d / f"{p.camera.name}_mono.pfm", p.mono_depth)
    for p in state.accumulated_pseudo:
        if p.sparse_depth is not None:
            write_pfm(d / f"{p.camera.name}_sparse.pfm", p.sparse_depth)
    for name, m in state.training_sparse.items():
        write_pfm(d / f"{name}_sparse.pfm", m)
    write_checkpoint(d / "cloud.ckpt", cloud, iteration=loop)
    write_metric_log(d / "metrics.jsonl", mlog)
    history = {"point_counts": state.point_counts, "loops": state.metrics,
               "accumulated_pseudo": len(state.accumulated_pseudo)}
    (root / "history.json").write_text(json.dumps(history, indent=1, sort_keys=True))
