"""Sparse SfM models: COLMAP text I/O, point filters, sparse depth maps and
point-cloud initialization.

Image labels: an image is a pseudo view when its name is in the caller's
``pseudo_names`` set or, by default, when the name starts with ``pseudo``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import (Camera, CameraIntrinsics, CameraPose, GaussianCloud, logit, quat_normalize,
                   quat_to_rotmat)

log = logging.getLogger(__name__)

MATCH_ERROR_TAU = 2.0
INIT_OPACITY = 0.1
SINGLE_POINT_SCALE = 0.1
PSEUDO_PREFIX = "pseudo"


@dataclass(frozen=True)
class SfmCamera:
    id: int
    model: str
    width: int
    height: int
    params: tuple

    @property
    def intrinsics(self) -> CameraIntrinsics:
        if self.model == "PINHOLE":
            fx, fy, cx, cy = self.params
        else:
            fx, cx, cy = self.params
            fy = fx
        return CameraIntrinsics(fx, fy, cx, cy, self.width, self.height)

    @classmethod
    def pinhole(cls, cam_id: int, k: CameraIntrinsics) -> "SfmCamera":
        return cls(cam_id, "PINHOLE", k.width, k.height, (k.fx, k.fy, k.cx, k.cy))


_CAMERA_NPARAMS = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}


@dataclass
class SfmImage:
    id: int
    name: str
    camera_id: int
    qvec: np.ndarray  # COLMAP world -> camera rotation (w, x, y, z)
    tvec: np.ndarray  # COLMAP translation, x_cam = R X + t
    xys: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def pose(self) -> CameraPose:
        q = quat_normalize(self.qvec)
        return CameraPose(q, -quat_to_rotmat(q).T @ self.tvec)

    @classmethod
    def from_pose(cls, image_id: int, name: str, camera_id: int, pose: CameraPose,
                  xys=None, point3d_ids=None) -> "SfmImage":
        return cls(image_id, name, camera_id, pose.rotation.copy(), -pose.rotmat @ pose.center,
                   np.zeros((0, 2)) if xys is None else np.asarray(xys, float).reshape(-1, 2),
                   np.zeros(0, np.int64) if point3d_ids is None
                   else np.asarray(point3d_ids, np.int64))


@dataclass
class SfmPoint3D:
    id: int
    xyz: np.ndarray
    rgb: tuple
    reproj_error: float
    track: list  # (image_id, keypoint_index) pairs


@dataclass
class SfmModel:
    cameras: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict)
    points: dict = field(default_factory=dict)
    training_image_ids: set = field(default_factory=set)
    pseudo_image_ids: set = field(default_factory=set)

    def camera_for(self, image_id: int) -> Camera:
        im = self.images[image_id]
        return Camera(self.cameras[im.camera_id].intrinsics, im.pose, im.name)

    def image_id_by_name(self, name: str) -> int:
        for im in self.images.values():
            if im.name == name:
                return im.id
        raise KeyError(name)

    def canonical(self) -> tuple:
        """Hashable snapshot used for exact model comparison."""
        cams = tuple(sorted((c.id, c.model, c.width, c.height, tuple(map(float, c.params)))
                            for c in self.cameras.values()))
        ims = tuple(sorted((i.id, i.name, i.camera_id, tuple(map(float, i.qvec)),
                            tuple(map(float, i.tvec)), tuple(map(float, i.xys.ravel())),
                            tuple(map(int, i.point3d_ids))) for i in self.images.values()))
        pts = tuple(sorted((p.id, tuple(map(float, p.xyz)), tuple(map(int, p.rgb)),
                            float(p.reproj_error), tuple(map(tuple, p.track)))
                           for p in self.points.values()))
        return cams, ims, pts, tuple(sorted(self.training_image_ids)), \
            tuple(sorted(self.pseudo_image_ids))

    def __eq__(self, other) -> bool:
        return isinstance(other, SfmModel) and self.canonical() == other.canonical()


def validate_model(model: SfmModel) -> SfmModel:
    for p in model.points.values():
        if not p.track:
            raise ValueError(f"point {p.id} has an empty track")
        for image_id, kp in p.track:
            if image_id not in model.images:
                raise ValueError(f"point {p.id} references unknown image {image_id}")
            if not 0 <= kp < len(model.images[image_id].xys):
                raise ValueError(f"point {p.id} references keypoint {kp} out of range "
                                 f"in image {image_id}")
    for im in model.images.values():
        if im.camera_id not in model.cameras:
            raise ValueError(f"image {im.id} references unknown camera {im.camera_id}")
        for pid in im.point3d_ids:
            if pid != -1 and int(pid) not in model.points:
                raise ValueError(f"image {im.id} references unknown point {pid}")
    return model


def label_images(model: SfmModel, pseudo_names: Iterable[str] | None = None) -> SfmModel:
    names = set(pseudo_names) if pseudo_names is not None else None
    pseudo = {i.id for i in model.images.values()
              if (i.name in names if names is not None else i.name.startswith(PSEUDO_PREFIX))}
    model.pseudo_image_ids = pseudo
    model.training_image_ids = set(model.images) - pseudo
    return model


def _data_lines(path: Path):
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def parse_colmap_text(directory, pseudo_names: Iterable[str] | None = None) -> SfmModel:
    """Read ``cameras.txt``, ``images.txt`` and ``points3D.txt``."""
    d = Path(directory)
    model = SfmModel()
    path = d / "cameras.txt"
    for lineno, line in _data_lines(path):
        tok = line.split()
        try:
            cam_id, name, w, h = int(tok[0]), tok[1], int(tok[2]), int(tok[3])
            if name not in _CAMERA_NPARAMS:
                raise ValueError(f"unsupported camera model {name}")
            params = tuple(float(v) for v in tok[4:])
            if len(params) != _CAMERA_NPARAMS[name]:
                raise ValueError(f"{name} expects {_CAMERA_NPARAMS[name]} parameters")
        except (IndexError, ValueError) as e:
            raise ValueError(f"{path}:{lineno}: {e}") from None
        model.cameras[cam_id] = SfmCamera(cam_id, name, w, h, params)

    path = d / "images.txt"
    # keypoint lines may be blank, so pair lines from the raw file
    for (lineno, head), (_, kps) in _pair_image_lines(path):
        tok = head.split()
        try:
            if len(tok) < 10:
                raise ValueError("expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")
            image_id = int(tok[0])
            qvec = np.array([float(v) for v in tok[1:5]])
            tvec = np.array([float(v) for v in tok[5:8]])
            cam_id = int(tok[8])
            name = " ".join(tok[9:])
            kt = kps.split()
            if len(kt) % 3:
                raise ValueError("keypoint line must hold X Y POINT3D_ID triplets")
            arr = np.array(kt, dtype=object).reshape(-1, 3)
            xys = arr[:, :2].astype(np.float64)
            ids = arr[:, 2].astype(np.int64)
        except (ValueError, TypeError) as e:
            raise ValueError(f"{path}:{lineno}: {e}") from None
        model.images[image_id] = SfmImage(image_id, name, cam_id, qvec, tvec, xys, ids)

    path = d / "points3D.txt"
    for lineno, line in _data_lines(path):
        tok = line.split()
        try:
            if len(tok) < 8 or (len(tok) - 8) % 2:
                raise ValueError("expected POINT3D_ID X Y Z R G B ERROR (IMAGE_ID POINT2D_IDX)...")
            pid = int(tok[0])
            xyz = np.array([float(v) for v in tok[1:4]])
            rgb = tuple(int(v) for v in tok[4:7])
            err = float(tok[7])
            track = [(int(tok[i]), int(tok[i + 1])) for i in range(8, len(tok), 2)]
        except ValueError as e:
            raise ValueError(f"{path}:{lineno}: {e}") from None
        model.points[pid] = SfmPoint3D(pid, xyz, rgb, err, track)

    label_images(model, pseudo_names)
    return validate_model(model)


def _pair_image_lines(path: Path):
    """(header, keypoints) line pairs; the keypoint line may be blank."""
    with open(path) as f:
        raw = [(i, ln.rstrip("\n")) for i, ln in enumerate(f, 1)]
    body = [(i, ln.strip()) for i, ln in raw if not ln.lstrip().startswith("#")]
    # strip trailing blank lines only; a blank keypoint line is meaningful
    while body and not body[-1][1]:
        body.pop()
    # leading blank lines before the first header carry no data
    while body and not body[0][1]:
        body.pop(0)
    if len(body) % 2:
        body.append((body[-1][0] + 1, ""))
    return [(body[i], body[i + 1]) for i in range(0, len(body), 2)]


def write_colmap_text(model: SfmModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.txt", "w") as f:
        f.write("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for c in sorted(model.cameras.values(), key=lambda c: c.id):
            f.write(" ".join([str(c.id), c.model, str(c.width), str(c.height)]
                             + [repr(float(p)) for p in c.params]) + "\n")
    with open(d / "images.txt", "w") as f:
        f.write("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        f.write("# POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for im in sorted(model.images.values(), key=lambda i: i.id):
            head = [str(im.id)] + [repr(float(v)) for v in im.qvec] \
                + [repr(float(v)) for v in im.tvec] + [str(im.camera_id), im.name]
            f.write(" ".join(head) + "\n")
            f.write(" ".join(f"{float(x)!r} {float(y)!r} {int(p)}"
                             for (x, y), p in zip(im.xys, im.point3d_ids)) + "\n")
    with open(d / "points3D.txt", "w") as f:
        f.write("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for p in sorted(model.points.values(), key=lambda p: p.id):
            tok = [str(p.id)] + [repr(float(v)) for v in p.xyz] + [str(int(v)) for v in p.rgb] \
                + [repr(float(p.reproj_error))] + [f"{i} {k}" for i, k in p.track]
            f.write(" ".join(tok) + "\n")


def filter_match_error(model: SfmModel, tau: float = MATCH_ERROR_TAU) -> dict:
    """Depth eligibility per point id: ``0 <= error < tau``.

    Ineligible points stay in the model; they still seed Gaussians.
    """
    return {pid: bool(0.0 <= p.reproj_error < tau) for pid, p in model.points.items()}


def filter_pseudo_only(model: SfmModel) -> SfmModel:
    """Copy of the model without points observed only in pseudo views."""
    drop = {pid for pid, p in model.points.items()
            if all(image_id in model.pseudo_image_ids for image_id, _ in p.track)}
    images = {}
    for iid, im in model.images.items():
        ids = im.point3d_ids.copy()
        if drop and len(ids):
            ids[np.isin(ids, list(drop))] = -1
        images[iid] = replace(im, point3d_ids=ids)
    points = {pid: p for pid, p in model.points.items() if pid not in drop}
    return SfmModel(dict(model.cameras), images, points, set(model.training_image_ids),
                    set(model.pseudo_image_ids))


def project_sparse_depth(model: SfmModel, view_id: int, eligible: dict | None = None,
                         use_tracks: bool = True) -> np.ndarray:
    """Sparse depth raster for one image (0 = no depth).

    With ``use_tracks`` a point lands at its own keypoint in this view and
    only if the view is in its track; otherwise every eligible point is
    projected geometrically. Collisions keep the nearest depth.
    """
    if view_id not in model.images:
        raise KeyError(f"unknown image {view_id}")
    if eligible is None:
        eligible = filter_match_error(model)
    im = model.images[view_id]
    cam = model.camera_for(view_id)
    k = cam.intrinsics
    rot, center = cam.pose.rotmat, cam.pose.center
    depth = np.zeros((k.height, k.width))
    behind = 0
    for pid, p in model.points.items():
        if not eligible.get(pid, False):
            continue
        zc = rot @ (p.xyz - center)
        if use_tracks:
            kps = [kp for image_id, kp in p.track if image_id == view_id]
            if not kps:
                continue
            if zc[2] <= 0:
                behind += 1
                continue
            u, v = im.xys[kps[0]]
        else:
            if zc[2] <= 0:
                behind += 1
                continue
            u, v = k.fx * zc[0] / zc[2] + k.cx, k.fy * zc[1] / zc[2] + k.cy
        px, py = int(np.floor(u + 0.5)), int(np.floor(v + 0.5))
        if not (0 <= px < k.width and 0 <= py < k.height):
            continue
        cur = depth[py, px]
        if cur == 0 or zc[2] < cur:
            depth[py, px] = zc[2]
    if behind:
        log.warning("image %s: skipped %d point(s) behind the camera", im.name, behind)
    return depth


def init_gaussians_from_points(points: Sequence[SfmPoint3D]) -> GaussianCloud:
    """Isotropic Gaussians at SfM points, scaled by 3-NN mean distance."""
    points = list(points)
    if not points:
        raise ValueError("no points to initialize from")
    xyz = np.stack([p.xyz for p in points]).astype(np.float64)
    n = len(points)
    if n == 1:
        dist = np.array([SINGLE_POINT_SCALE])
    else:
        kk = min(4, n)
        d, _ = cKDTree(xyz).query(xyz, k=kk)
        dist = np.maximum(d[:, 1:].mean(axis=1), 1e-7)
    rgb = np.array([p.rgb for p in points], dtype=np.float64) / 255.0
    return GaussianCloud(mu=xyz, raw_opacity=np.full(n, float(logit(INIT_OPACITY))),
                         raw_scale=np.repeat(np.log(dist)[:, None], 3, axis=1),
                         rotation_q=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), color=rgb)


@dataclass
class SfmView:
    """An image handed to an SfM provider, with its known pose."""

    name: str
    camera: Camera
    is_pseudo: bool = False
    image: np.ndarray | None = None


class SfmProvider(Protocol):
    def run(self, views: Sequence[SfmView]) -> SfmModel: ...


class ColmapDirProvider:
    """Loads a precomputed COLMAP text model and keeps the requested images."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def run(self, views: Sequence[SfmView] | None = None) -> SfmModel:
        model = parse_colmap_text(self.directory)
        if views is None:
            return model
        wanted = {v.name: v for v in views}
        keep = {iid for iid, im in model.images.items() if im.name in wanted}
        images = {iid: im for iid, im in model.images.items() if iid in keep}
        points = {}
        for pid, p in model.points.items():
            track = [(i, kp) for i, kp in p.track if i in keep]
            if track:
                points[pid] = replace(p, track=track)
        for iid, im in images.items():
            ids = im.point3d_ids.copy()
            gone = [(int(q) not in points) for q in ids]
            ids[np.array(gone, dtype=bool)] = -1
            images[iid] = replace(im, point3d_ids=ids)
        out = SfmModel(dict(model.cameras), images, points)
        label_images(out, [n for n, v in wanted.items() if v.is_pseudo])
        return validate_model(out)
