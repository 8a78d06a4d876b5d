"""Gradient-descent fitting of a Gaussian cloud, evaluation and checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rasterizer
from .core import FIELD_WIDTH, FIELDS, Camera, GaussianCloud
from .densify import DensifyConfig, adc_step, sfs_select, sfs_split
from .losses import LossWeights, psnr, ssim, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "loopsplat-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class View:
    camera: Camera
    kind: str = "training"  # or "pseudo"
    image: np.ndarray | None = None
    sparse_depth: np.ndarray | None = None
    mono_depth: np.ndarray | None = None
    mono_is_inverse: bool = False

    @property
    def name(self) -> str:
        return self.camera.name


@dataclass
class TrainConfig:
    iterations: int = 10000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    background: tuple = (0.0, 0.0, 0.0)
    schedule: str = "round_robin"
    deterministic: bool = True
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("train.iterations must be >= 0")
        for f in ("lr_position", "lr_position_final", "lr_color", "lr_opacity", "lr_scale",
                  "lr_rotation"):
            if getattr(self, f) <= 0:
                raise ValueError(f"train.{f} must be positive")
        if self.schedule not in ("round_robin", "random"):
            raise ValueError("train.schedule must be 'round_robin' or 'random'")
        self.background = tuple(float(v) for v in self.background)


class Adam:
    """Adam over the flat (N, 14) parameter rows with per-column rates."""

    def __init__(self, n: int, cfg: TrainConfig):
        self.cfg = cfg
        self.m = np.zeros((n, 14))
        self.v = np.zeros((n, 14))
        self.step_count = 0

    def lr_row(self, pos_lr: float) -> np.ndarray:
        c = self.cfg
        rates = {"mu": pos_lr, "raw_opacity": c.lr_opacity, "raw_scale": c.lr_scale,
                 "rotation_q": c.lr_rotation, "color": c.lr_color}
        return np.concatenate([np.full(FIELD_WIDTH[f], rates[f]) for f in FIELDS])

    def step(self, params: np.ndarray, grads: np.ndarray, pos_lr: float) -> np.ndarray:
        c = self.cfg
        self.step_count += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grads
        self.v = c.beta2 * self.v + (1 - c.beta2) * grads * grads
        mh = self.m / (1 - c.beta1 ** self.step_count)
        vh = self.v / (1 - c.beta2 ** self.step_count)
        return params - self.lr_row(pos_lr) * mh / (np.sqrt(vh) + c.eps)

    def remap(self, source: np.ndarray) -> None:
        """Follow a densify mutation; new rows start with zero moments."""
        live = source >= 0
        for name in ("m", "v"):
            old = getattr(self, name)
            new = np.zeros((len(source), old.shape[1]))
            new[live] = old[source[live]]
            setattr(self, name, new)


def position_lr(cfg: TrainConfig, it: int, extent: float) -> float:
    """Log-linear decay from ``lr_position`` to ``lr_position_final``."""
    t = 0.0 if cfg.iterations <= 1 else min(max(it / cfg.iterations, 0.0), 1.0)
    return extent * math.exp((1 - t) * math.log(cfg.lr_position)
                             + t * math.log(cfg.lr_position_final))


def _record(it: int, view: View, terms, n: int) -> dict:
    rec = {"iter": it, "view": view.name, "kind": view.kind, "loss": float(terms.total)}
    rec.update({k: float(v) for k, v in terms.terms.items()})
    rec["n_gaussians"] = n
    return rec


def train(cloud: GaussianCloud, views: Sequence[View], cfg: TrainConfig,
          densify_cfg: DensifyConfig | None = None, weights: LossWeights | None = None,
          scene_extent: float = 1.0) -> tuple[GaussianCloud, list]:
    """Optimize ``cloud`` against ``views``; returns the new cloud and the metric log."""
    weights = weights or LossWeights()
    dcfg = densify_cfg or DensifyConfig(enabled=False, sfs_enabled=False)
    cloud = cloud.copy()
    if cfg.iterations == 0 or not views:
        return cloud, []
    bg = np.asarray(cfg.background)
    rng = np.random.default_rng([cfg.seed, 2024])
    opt = Adam(len(cloud), cfg)
    grad_acc = np.zeros(len(cloud))
    grad_cnt = np.zeros(len(cloud))
    train_views = [v for v in views if v.kind == "training"]
    stop = int(dcfg.stop_fraction * cfg.iterations)
    history = []

    for it in range(1, cfg.iterations + 1):
        if cfg.schedule == "round_robin":
            view = views[(it - 1) % len(views)]
        else:
            view = views[int(rng.integers(len(views)))]
        cam = view.camera
        out = rasterizer.render(cloud, cam, bg)
        terms = total_loss(out.color, view.image, out, view.sparse_depth, view.mono_depth,
                           weights, view.kind, view.mono_is_inverse)
        if not np.isfinite(terms.total):
            raise FloatingPointError(f"non-finite loss at iteration {it}: {terms.terms}")
        g = rasterizer.backward(cloud, cam, bg, terms.grad_color, terms.grad_depth,
                                terms.grad_nonmax, forward=out)
        flat = opt.step(cloud.flat(), g.flat(), position_lr(cfg, it, scene_extent))
        cloud = GaussianCloud.from_flat(flat)

        if dcfg.enabled and it <= stop:
            ndc = g.d_mean2d * np.array([0.5 * cam.width, 0.5 * cam.height])
            grad_acc[g.visible] += np.linalg.norm(ndc[g.visible], axis=1)
            grad_cnt[g.visible] += 1
            if it >= dcfg.start_iter and it % dcfg.interval == 0:
                mean = np.where(grad_cnt > 0, grad_acc / np.maximum(grad_cnt, 1), 0.0)
                cloud, source = adc_step(cloud, mean, dcfg, scene_extent, rng)
                opt.remap(source)
                grad_acc = np.zeros(len(cloud))
                grad_cnt = np.zeros(len(cloud))
        if dcfg.sfs_enabled and it <= stop and train_views and it >= dcfg.sfs_start \
                and (it - dcfg.sfs_start) % dcfg.sfs_interval == 0 and len(cloud):
            renders = [rasterizer.render(cloud, v.camera, bg) for v in train_views]
            chosen = sfs_select(renders, [v.image for v in train_views], dcfg.sfs_top_fraction)
            if chosen:
                cloud, source = sfs_split(cloud, chosen, dcfg.sfs_m, dcfg.split_shrink, rng)
                opt.remap(source)
                grad_acc = np.where(source >= 0, grad_acc[np.maximum(source, 0)], 0.0)
                grad_cnt = np.where(source >= 0, grad_cnt[np.maximum(source, 0)], 0.0)
        assert len(opt.m) == len(cloud) == len(grad_acc), "optimizer state out of step"

        if it % cfg.log_every == 0 or it == cfg.iterations:
            rec = _record(it, view, terms, len(cloud))
            history.append(rec)
            log.debug("iter %d loss %.6f n=%d", it, rec["loss"], len(cloud))
    return cloud, history


def evaluate(cloud: GaussianCloud, views: Sequence[View], background=(0.0, 0.0, 0.0)) -> dict:
    rows = []
    for v in views:
        pred = rasterizer.render(cloud, v.camera, background).color
        rows.append({"name": v.name, "psnr": psnr(pred, v.image), "ssim": ssim(pred, v.image)})
    return {
        "views": rows,
        "mean_psnr": float(np.mean([r["psnr"] for r in rows])) if rows else float("nan"),
        "mean_ssim": float(np.mean([r["ssim"] for r in rows])) if rows else float("nan"),
    }


def write_checkpoint(path, cloud: GaussianCloud, scene_extent: float = 1.0, iteration: int = 0,
                     seed: int = 0) -> None:
    header = (f"{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\ncount {len(cloud)}\n"
              f"scene_extent {float(scene_extent)!r}\niteration {int(iteration)}\n"
              f"seed {int(seed)}\nend_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        for name in FIELDS:
            f.write(np.ascontiguousarray(getattr(cloud, name), dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[GaussianCloud, dict]:
    with open(path, "rb") as f:
        if f.readline().decode("ascii").strip() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        meta = {}
        while True:
            line = f.readline().decode("ascii").strip()
            if not line:
                raise ValueError(f"{path}: truncated header")
            if line == "end_header":
                break
            key, value = line.split(" ", 1)
            meta[key] = value
        if int(meta.get("version", -1)) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        n = int(meta["count"])
        arrays = {}
        for name in FIELDS:
            w = FIELD_WIDTH[name]
            buf = f.read(4 * n * w)
            if len(buf) != 4 * n * w:
                raise ValueError(f"{path}: truncated field {name}")
            a = np.frombuffer(buf, dtype="<f4").astype(np.float64)
            arrays[name] = a if w == 1 else a.reshape(n, w)
    meta = {"count": n, "scene_extent": float(meta["scene_extent"]),
            "iteration": int(meta["iteration"]), "seed": int(meta["seed"])}
    return GaussianCloud(**arrays), meta


def write_metric_log(path, records: Sequence[dict]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_metric_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
