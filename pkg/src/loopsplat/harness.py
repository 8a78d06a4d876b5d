"""Synthetic ground truth: procedural scenes, camera rigs, a simulated SfM
provider and a monocular-depth simulator."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import rasterizer
from .core import Camera, CameraIntrinsics, CameraPose, GaussianCloud, logit, quat_normalize, \
    quat_to_rotmat
from .imageio import read_pfm
from .sfm import SfmCamera, SfmImage, SfmModel, SfmPoint3D, SfmView, validate_model

OCCLUSION_T = 0.5


@dataclass
class SyntheticScene:
    gt_cloud: GaussianCloud
    extent: float
    seed: int
    kind: str = "blob_field"


def gen_scene(kind: str = "blob_field", n: int = 50, seed: int = 0) -> SyntheticScene:
    if n < 1:
        raise ValueError("scene needs at least one Gaussian")
    rng = np.random.default_rng(seed)
    if kind == "blob_field":
        mu = rng.uniform(-0.5, 0.5, (n, 3))
        scale = rng.uniform(0.02, 0.08, (n, 3))
        rot = quat_normalize(rng.normal(size=(n, 4)))
        color = rng.uniform(0.0, 1.0, (n, 3))
        opac = rng.uniform(0.6, 0.95, n)
    elif kind == "textured_plane":
        side = int(np.ceil(np.sqrt(n)))
        step = 1.0 / side
        ij = np.array([(i, j) for i in range(side) for j in range(side)][:n], dtype=float)
        mu = np.column_stack([-0.5 + (ij[:, 1] + 0.5) * step, -0.5 + (ij[:, 0] + 0.5) * step,
                              np.zeros(n)])
        scale = np.tile([0.6 * step, 0.6 * step, 0.005], (n, 1))
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        checker = ((ij[:, 0] // 2 + ij[:, 1] // 2) % 2)[:, None]
        color = np.where(checker > 0, [0.9, 0.85, 0.2], [0.1, 0.2, 0.7])
        opac = np.full(n, 0.9)
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    cloud = GaussianCloud(mu=mu, raw_opacity=logit(opac), raw_scale=np.log(scale),
                          rotation_q=rot, color=color)
    return SyntheticScene(cloud, 1.0, seed, kind)


def gen_rig(kind: str = "forward_arc", n_views: int = 8, radius: float = 2.0, target=(0, 0, 0),
            width: int = 64, height: int = 64, arc_deg: float = 60.0,
            prefix: str = "view") -> list[Camera]:
    """Cameras on a horizontal arc, evenly spaced, all looking at ``target``."""
    if kind != "forward_arc":
        raise ValueError(f"unknown rig kind {kind!r}")
    if n_views < 1:
        raise ValueError("rig needs at least one view")
    target = np.asarray(target, dtype=np.float64)
    half = np.deg2rad(arc_deg) / 2
    angles = np.zeros(1) if n_views == 1 else np.linspace(-half, half, n_views)
    k = CameraIntrinsics(0.9 * width, 0.9 * width, width / 2, height / 2, width, height)
    cams = []
    for i, th in enumerate(angles):
        c = target + radius * np.array([np.sin(th), 0.0, -np.cos(th)])
        cams.append(Camera(k, CameraPose.look_at(c, target), f"{prefix}_{i:03d}"))
    return cams


def save_rig(path, cameras: Sequence[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_json() for c in cameras], indent=1))


def load_rig(path) -> list[Camera]:
    return [Camera.from_json(d) for d in json.loads(Path(path).read_text())]


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def _candidate_points(scene: SyntheticScene, per_gaussian: int, seed: int):
    g = scene.gt_cloud
    xyz, src = [], []
    for i in range(len(g)):
        rng = np.random.default_rng([seed, 7919, i])
        u = rng.normal(size=(per_gaussian, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        u *= rng.uniform(0, 1, (per_gaussian, 1)) ** (1 / 3)
        u[0] = 0.0
        m = quat_to_rotmat(g.rotation_q[i]) * np.exp(g.raw_scale[i])
        xyz.append(g.mu[i] + u @ m.T)
        src.append(np.full(per_gaussian, i))
    return np.concatenate(xyz), np.concatenate(src)


def synthetic_sfm(scene: SyntheticScene, views: Sequence[SfmView], noise_px: float = 0.0,
                  dropout: float = 0.0, seed: int = 0, samples_per_gaussian: int = 8,
                  detect_prob: float = 1.0, min_track: int = 2,
                  match_tolerance: float = 0.2) -> SfmModel:
    """Simulated triangulation with fixed poses.

    Candidate surface points are drawn within 1 sigma of each ground-truth
    Gaussian. A point is observed in a view when it projects inside the
    image, is not occluded (ground-truth transmittance in front of it above
    0.5) and passes a per-observation detection draw. Pseudo views that
    carry a rendered image lose detections where the rendering departs from
    ground truth by more than ``match_tolerance``. Points need ``min_track``
    observations. All draws are keyed by (seed, view name, point), so adding
    views never removes existing observations.
    """
    if not views:
        raise ValueError("synthetic SfM needs at least one view")
    xyz, src = _candidate_points(scene, samples_per_gaussian, seed)
    npts = len(xyz)
    obs = []  # per view: (mask, keypoints, noise)
    for v in views:
        cam = v.camera
        k = cam.intrinsics
        tc = (xyz - cam.pose.center) @ cam.pose.rotmat.T
        z = tc[:, 2]
        zs = np.where(z > rasterizer.NEAR_PLANE, z, 1.0)
        uv = np.column_stack([k.fx * tc[:, 0] / zs + k.cx, k.fy * tc[:, 1] / zs + k.cy])
        pix = np.floor(uv + 0.5)
        inside = (z > rasterizer.NEAR_PLANE) & (pix[:, 0] >= 0) & (pix[:, 0] < k.width) \
            & (pix[:, 1] >= 0) & (pix[:, 1] < k.height)
        vis = inside.copy()
        if inside.any():
            t = rasterizer.transmittance_at(scene.gt_cloud, cam, uv[inside], z[inside],
                                            exclude=src[inside])
            vis[inside] = t > OCCLUSION_T
        rng = np.random.default_rng([seed, _key(v.name)])
        detect = rng.uniform(size=npts)
        noise = rng.normal(0.0, 1.0, (npts, 2)) * noise_px
        p = np.full(npts, detect_prob)
        if v.is_pseudo and v.image is not None and vis.any():
            gt = rasterizer.render(scene.gt_cloud, cam).color
            px = pix[vis].astype(int)
            err = np.abs(v.image[px[:, 1], px[:, 0]] - gt[px[:, 1], px[:, 0]]).mean(axis=1)
            p[vis] *= np.clip(1.0 - err / match_tolerance, 0.0, 1.0)
        mask = vis & (detect < p)
        obs.append((mask, uv + noise, noise))

    drop = np.random.default_rng([seed, 104729]).uniform(size=npts) < dropout
    model = SfmModel()
    for vi, v in enumerate(views):
        model.cameras[vi + 1] = SfmCamera.pinhole(vi + 1, v.camera.intrinsics)
    kp_lists = [[] for _ in views]
    pid = 0
    for i in range(npts):
        if drop[i]:
            continue
        seen = [vi for vi in range(len(views)) if obs[vi][0][i]]
        if len(seen) < max(min_track, 1):
            continue
        pid += 1
        track, sq = [], []
        for vi in seen:
            kp_lists[vi].append((obs[vi][1][i], pid))
            track.append((vi + 1, len(kp_lists[vi]) - 1))
            sq.append(float(np.sum(obs[vi][2][i] ** 2)))
        rgb = tuple(int(c) for c in np.rint(255 * np.clip(scene.gt_cloud.color[src[i]], 0, 1)))
        model.points[pid] = SfmPoint3D(pid, xyz[i].copy(), rgb, float(np.sqrt(np.mean(sq))), track)
    for vi, v in enumerate(views):
        kps = kp_lists[vi]
        xys = np.array([kp for kp, _ in kps]).reshape(-1, 2)
        ids = np.array([q for _, q in kps], dtype=np.int64)
        model.images[vi + 1] = SfmImage.from_pose(vi + 1, v.name, vi + 1, v.camera.pose, xys, ids)
    model.pseudo_image_ids = {vi + 1 for vi, v in enumerate(views) if v.is_pseudo}
    model.training_image_ids = set(model.images) - model.pseudo_image_ids
    return validate_model(model)


class SyntheticSfmProvider:
    def __init__(self, scene: SyntheticScene, noise_px: float = 0.5, dropout: float = 0.0,
                 seed: int = 0, samples_per_gaussian: int = 8, detect_prob: float = 1.0,
                 min_track: int = 2, match_tolerance: float = 0.2):
        self.scene = scene
        self.kw = dict(noise_px=noise_px, dropout=dropout, seed=seed,
                       samples_per_gaussian=samples_per_gaussian, detect_prob=detect_prob,
                       min_track=min_track, match_tolerance=match_tolerance)

    def run(self, views: Sequence[SfmView]) -> SfmModel:
        return synthetic_sfm(self.scene, views, **self.kw)


def fill_nearest(depth: np.ndarray) -> np.ndarray:
    """Replace zero pixels by the nearest positive one (all-zero -> ones)."""
    valid = depth > 0
    if valid.all():
        return depth.copy()
    if not valid.any():
        return np.ones_like(depth)
    _, (iy, ix) = distance_transform_edt(~valid, return_indices=True)
    return depth[iy, ix]


def mono_depth_sim(gt_depth: np.ndarray, a: float = 1.0, b: float = 0.0,
                   mode: str = "affine") -> tuple[np.ndarray, bool]:
    """Dense relative depth from a metric map; returns ``(map, is_inverse)``."""
    if a <= 0:
        raise ValueError("mono depth scale must be positive")
    d = fill_nearest(np.asarray(gt_depth, dtype=np.float64))
    if mode == "affine":
        return a * d + b, False
    if mode == "inverse_affine":
        return a / d + b, True
    raise ValueError(f"unknown mono mode {mode!r}")


class SimulatedMonoProvider:
    """Per-view random affine (or inverse-affine) of the ground-truth depth."""

    def __init__(self, scene: SyntheticScene, mode: str = "affine", seed: int = 0):
        self.scene, self.mode, self.seed = scene, mode, seed

    def estimate(self, camera: Camera, image: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
        rng = np.random.default_rng([self.seed, 31337, _key(camera.name)])
        a = rng.uniform(0.5, 2.0)
        b = rng.uniform(-1.0, 1.0)
        gt = rasterizer.render(self.scene.gt_cloud, camera).depth
        return mono_depth_sim(gt, a, b, self.mode)


class FileMonoProvider:
    """Reads ``<dir>/<image stem>.pfm``."""

    def __init__(self, directory, is_inverse: bool = False):
        self.directory = Path(directory)
        self.is_inverse = is_inverse

    def estimate(self, camera: Camera, image: np.ndarray | None = None) -> tuple[np.ndarray, bool]:
        path = self.directory / (Path(camera.name).stem + ".pfm")
        return fill_nearest(read_pfm(path).astype(np.float64)), self.is_inverse
