"""Differentiable splatting of a Gaussian cloud into color, depth and
per-pixel blending statistics.

Projection and the per-Gaussian chain rule are vectorized numpy; the
per-pixel blend (forward and backward) runs in a selectable kernel, see
:mod:`loopsplat._kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from ._kernels._constants import ALPHA_MAX, ALPHA_MIN
from .core import Camera, Gaussian, GaussianCloud, quat_normalize, quat_to_rotmat

NEAR_PLANE = 0.01
LOWPASS = 0.3


@dataclass(frozen=True)
class Splat2D:
    gaussian_index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth_z: float
    opacity: float
    color: np.ndarray


@dataclass
class Projection:
    """Per-Gaussian screen-space quantities for one camera (all N rows)."""

    visible: np.ndarray
    order: np.ndarray  # visible Gaussian indices sorted front to back
    t_cam: np.ndarray
    means2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray  # (a, b, c) of the inverse 2D covariance
    radius: np.ndarray
    boxes: np.ndarray  # inclusive pixel box x0, y0, x1, y1
    # saved for the backward pass
    w2c: np.ndarray
    jw: np.ndarray
    sigma: np.ndarray
    rq: np.ndarray
    scale: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), 0 = invalid
    accum_alpha: np.ndarray
    t_final: np.ndarray
    max_weight_index: np.ndarray  # cloud index, -1 where nothing hit
    max_weight: np.ndarray
    nonmax_alpha_sum: np.ndarray
    nonmax_count: np.ndarray
    projection: Projection | None = None


@dataclass
class Gradients:
    d_mu: np.ndarray
    d_raw_opacity: np.ndarray
    d_raw_scale: np.ndarray
    d_rotation_q: np.ndarray
    d_color: np.ndarray
    d_mean2d: np.ndarray  # pixel-space, used by density control
    visible: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.d_mu, self.d_raw_opacity[:, None], self.d_raw_scale,
                               self.d_rotation_q, self.d_color], axis=1)


def _check_finite(cloud: GaussianCloud) -> None:
    if not cloud.is_finite():
        raise ValueError("non-finite parameter")


def project(cloud: GaussianCloud, cam: Camera, near: float = NEAR_PLANE) -> Projection:
    k = cam.intrinsics
    w2c = cam.pose.rotmat
    n = len(cloud)
    t = (cloud.mu - cam.pose.center) @ w2c.T
    z = t[:, 2]
    front = z > near
    zs = np.where(front, z, 1.0)
    x, y = t[:, 0], t[:, 1]

    s = cloud.scale
    rq = quat_to_rotmat(cloud.rotation_q) if n else np.zeros((0, 3, 3))
    m = rq * s[:, None, :]
    sigma = m @ np.swapaxes(m, 1, 2)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = k.fx / zs
    jac[:, 0, 2] = -k.fx * x / zs**2
    jac[:, 1, 1] = k.fy / zs
    jac[:, 1, 2] = -k.fy * y / zs**2
    jw = jac @ w2c
    cov2d = jw @ sigma @ np.swapaxes(jw, 1, 2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS

    means2d = np.stack([k.fx * x / zs + k.cx, k.fy * y / zs + k.cy], axis=1)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam)

    with np.errstate(invalid="ignore"):
        x0 = np.maximum(np.ceil(means2d[:, 0] - radius), 0)
        y0 = np.maximum(np.ceil(means2d[:, 1] - radius), 0)
        x1 = np.minimum(np.floor(means2d[:, 0] + radius), k.width - 1)
        y1 = np.minimum(np.floor(means2d[:, 1] + radius), k.height - 1)
    visible = front & np.isfinite(radius) & (det > 0) & (x0 <= x1) & (y0 <= y1)
    boxes = np.zeros((n, 4), dtype=np.int64)
    boxes[visible] = np.stack([x0, y0, x1, y1], axis=1)[visible].astype(np.int64)
    idx = np.flatnonzero(visible)
    order = idx[np.argsort(z[idx], kind="stable")]
    return Projection(visible, order, t, means2d, cov2d, conic, radius, boxes,
                      w2c, jw, sigma, rq, s)


def project_gaussian(g: Gaussian, cam: Camera, near: float = NEAR_PLANE) -> Splat2D | None:
    """Project one Gaussian; ``None`` means culled."""
    p = project(GaussianCloud.from_gaussians([g]), cam, near)
    if not p.visible[0]:
        return None
    return Splat2D(0, p.means2d[0], p.cov2d[0], float(p.t_cam[0, 2]), g.opacity,
                   np.asarray(g.color, dtype=np.float64))


def _kernel_args(cloud: GaussianCloud, proj: Projection):
    o = proj.order
    return (np.ascontiguousarray(proj.means2d[o]), np.ascontiguousarray(proj.conic[o]),
            np.ascontiguousarray(cloud.opacity[o]), np.ascontiguousarray(cloud.color[o]),
            np.ascontiguousarray(proj.t_cam[o, 2]), np.ascontiguousarray(proj.boxes[o]))


def render(cloud: GaussianCloud, cam: Camera, background=(0.0, 0.0, 0.0),
           backend: str | None = None) -> RenderOutput:
    _check_finite(cloud)
    proj = project(cloud, cam)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    kern = _kernels.get(backend)
    color, depth, accum, tfin, maxidx, maxw, nm_sum, nm_cnt = kern.blend_forward(
        *_kernel_args(cloud, proj), cam.width, cam.height, bg)
    hit = maxidx >= 0
    gidx = np.full(maxidx.shape, -1, dtype=np.int64)
    gidx[hit] = proj.order[maxidx[hit]]
    return RenderOutput(color, depth, accum, tfin, gidx, maxw, nm_sum, nm_cnt, proj)


def _quat_backward(q: np.ndarray, g_r: np.ndarray) -> np.ndarray:
    """dL/dq for raw quaternions, given dL/dR of R(q / |q|)."""
    qn = quat_normalize(q)
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = g_r
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2]
              - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=1)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    return (dqn - qn * np.sum(dqn * qn, axis=1, keepdims=True)) / norm


def backward(cloud: GaussianCloud, cam: Camera, background, grad_color, grad_depth=None,
             grad_nonmax=None, forward: RenderOutput | None = None,
             backend: str | None = None) -> Gradients:
    """Gradients of ``sum(grad_color * C + grad_depth * D + grad_nonmax * nonmax_alpha_sum)``.

    Sort order, culling, the alpha clamp and early termination are held
    fixed (they are piecewise constant in the parameters).
    """
    _check_finite(cloud)
    h, w = cam.height, cam.width
    n = len(cloud)
    def dense(g, shape):
        return np.ascontiguousarray(np.broadcast_to(g, shape), dtype=np.float64)

    grad_color = dense(grad_color, (h, w, 3))
    grad_depth = np.zeros((h, w)) if grad_depth is None else dense(grad_depth, (h, w))
    grad_nonmax = np.zeros((h, w)) if grad_nonmax is None else dense(grad_nonmax, (h, w))
    proj = forward.projection if forward is not None and forward.projection is not None \
        else project(cloud, cam)
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    o = proj.order
    local = _kernels.get(backend).blend_backward(
        *_kernel_args(cloud, proj), w, h, bg, grad_color, grad_depth, grad_nonmax)
    per = np.zeros((n, local.shape[1]))
    per[o] = local

    k = cam.intrinsics
    g_mean = per[:, 0:2]
    g_conic = per[:, 2:5]
    opac = cloud.opacity
    d_raw_opacity = per[:, 5] * opac * (1.0 - opac)
    d_color = per[:, 6:9]

    # conic (inverse of 2D covariance) -> 2D covariance
    q = np.empty((n, 2, 2))
    q[:, 0, 0], q[:, 0, 1], q[:, 1, 0], q[:, 1, 1] = (proj.conic[:, 0], proj.conic[:, 1],
                                                      proj.conic[:, 1], proj.conic[:, 2])
    gq = np.empty((n, 2, 2))
    gq[:, 0, 0] = g_conic[:, 0]
    gq[:, 1, 1] = g_conic[:, 2]
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_cov2d = -q @ gq @ q

    jw = proj.jw
    g_sigma = np.swapaxes(jw, 1, 2) @ g_cov2d @ jw
    g_jw = 2.0 * g_cov2d @ jw @ proj.sigma
    g_j = g_jw @ proj.w2c.T

    t = proj.t_cam
    x, y = t[:, 0], t[:, 1]
    z = np.where(proj.visible, t[:, 2], 1.0)
    fx, fy = k.fx, k.fy
    g_t = np.zeros((n, 3))
    g_t[:, 0] = g_j[:, 0, 2] * (-fx / z**2) + g_mean[:, 0] * fx / z
    g_t[:, 1] = g_j[:, 1, 2] * (-fy / z**2) + g_mean[:, 1] * fy / z
    g_t[:, 2] = (g_j[:, 0, 0] * (-fx / z**2) + g_j[:, 0, 2] * (2 * fx * x / z**3)
                 + g_j[:, 1, 1] * (-fy / z**2) + g_j[:, 1, 2] * (2 * fy * y / z**3)
                 - g_mean[:, 0] * fx * x / z**2 - g_mean[:, 1] * fy * y / z**2
                 + per[:, 9])
    g_t[~proj.visible] = 0.0
    d_mu = g_t @ proj.w2c

    m = proj.rq * proj.scale[:, None, :]
    g_m = 2.0 * g_sigma @ m
    g_s = np.einsum("nij,nij->nj", g_m, proj.rq)
    d_raw_scale = g_s * proj.scale
    g_rq = g_m * proj.scale[:, None, :]
    d_rot = _quat_backward(cloud.rotation_q, g_rq) if n else np.zeros((0, 4))

    vis = proj.visible
    for arr in (d_raw_scale, d_rot):
        arr[~vis] = 0.0
    return Gradients(d_mu, d_raw_opacity, d_raw_scale, d_rot, d_color, g_mean.copy(), vis)


def max_splat_radius(cloud: GaussianCloud, cam: Camera) -> float:
    """Largest projected 3-sigma radius (pixels) among visible splats."""
    p = project(cloud, cam)
    return float(p.radius[p.visible].max()) if p.visible.any() else 0.0


def transmittance_at(cloud: GaussianCloud, cam: Camera, pixels: np.ndarray, depths: np.ndarray,
                     exclude: np.ndarray | None = None) -> np.ndarray:
    """Transmittance along each query pixel ray in front of the query depth.

    ``exclude[i]`` names a Gaussian left out of query i (e.g. the one a
    surface sample was drawn from). Uses the same alpha rules as render.
    """
    proj = project(cloud, cam)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    out = np.ones(len(pixels))
    vis = np.flatnonzero(proj.visible)
    if len(vis) == 0 or len(pixels) == 0:
        return out
    d = pixels[:, None, :] - proj.means2d[vis][None, :, :]
    cn = proj.conic[vis]
    power = -0.5 * (cn[:, 0] * d[..., 0] ** 2 + cn[:, 2] * d[..., 1] ** 2) \
        - cn[:, 1] * d[..., 0] * d[..., 1]
    alpha = np.minimum(ALPHA_MAX, cloud.opacity[vis] * np.exp(power))
    px = np.rint(pixels)
    b = proj.boxes[vis]
    inbox = ((px[:, None, 0] >= b[:, 0]) & (px[:, None, 0] <= b[:, 2])
             & (px[:, None, 1] >= b[:, 1]) & (px[:, None, 1] <= b[:, 3]))
    front = proj.t_cam[vis, 2][None, :] < depths[:, None]
    use = inbox & front & (alpha >= ALPHA_MIN)
    if exclude is not None:
        use &= vis[None, :] != np.asarray(exclude).reshape(-1, 1)
    return np.prod(np.where(use, 1.0 - alpha, 1.0), axis=1)
