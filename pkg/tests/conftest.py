from pathlib import Path

import numpy as np
import pytest

from loopsplat.core import Camera, CameraIntrinsics, CameraPose, GaussianCloud, logit

FIXTURES = Path(__file__).parent / "fixtures"


def make_camera(width=16, height=16, f=None, center=(0.0, 0.0, -2.0), target=(0.0, 0.0, 0.0),
                name="cam"):
    f = f if f is not None else 0.9 * width
    k = CameraIntrinsics(f, f, width / 2, height / 2, width, height)
    return Camera(k, CameraPose.look_at(np.array(center, float), np.array(target, float)), name)


def axis_camera(width=16, height=16, f=20.0, cx=None, cy=None, name="axis"):
    """Identity-rotation camera at the origin looking down +z."""
    cx = width / 2 if cx is None else cx
    cy = height / 2 if cy is None else cy
    k = CameraIntrinsics(f, f, cx, cy, width, height)
    return Camera(k, CameraPose(np.array([1.0, 0, 0, 0]), np.zeros(3)), name)


def gaussians(mu, scale, opacity, color, rot=None):
    mu = np.atleast_2d(np.asarray(mu, float))
    n = len(mu)
    scale = np.broadcast_to(np.asarray(scale, float), (n, 3)).copy()
    rot = np.tile([1.0, 0, 0, 0], (n, 1)) if rot is None else np.atleast_2d(rot).astype(float)
    return GaussianCloud(mu=mu, raw_opacity=logit(np.broadcast_to(opacity, (n,)).astype(float)),
                         raw_scale=np.log(scale), rotation_q=rot,
                         color=np.broadcast_to(np.asarray(color, float), (n, 3)).copy())


def random_cloud(rng, n, spread=0.4):
    from loopsplat.core import quat_normalize
    return GaussianCloud(mu=rng.uniform(-spread, spread, (n, 3)),
                         raw_opacity=logit(rng.uniform(0.3, 0.9, n)),
                         raw_scale=np.log(rng.uniform(0.06, 0.2, (n, 3))),
                         rotation_q=quat_normalize(rng.normal(size=(n, 4))),
                         color=rng.uniform(0, 1, (n, 3)))


@pytest.fixture
def fixtures_dir():
    return FIXTURES
