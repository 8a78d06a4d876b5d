"""Training objectives and their gradients w.r.t. rendered quantities.

Every loss takes ``grad=False``; with ``grad=True`` it returns
``(value, gradient)`` where the gradient has the shape of the rendered
input it differentiates.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

MIN_WINDOW_VAR = 1e-12
MIN_WINDOW_VALID = 0.25


@dataclass
class LossWeights:
    lambda1: float = 0.8
    lambda2: float = 0.2
    lambda_o: float = 0.05
    lambda_d: float = 0.005
    lambda_p: float = 0.05
    dssim_mix: float = 0.2
    window_len: int = 32
    window_stride: int = 4
    pearson_reduce: str = "mean"

    def __post_init__(self):
        for f in ("lambda1", "lambda2", "lambda_o", "lambda_d", "lambda_p", "dssim_mix"):
            if getattr(self, f) < 0:
                raise ValueError(f"losses.{f} must be >= 0")
        if self.window_len < 2:
            raise ValueError("losses.window_len must be >= 2")
        if self.window_stride < 1:
            raise ValueError("losses.window_stride must be >= 1")
        if self.pearson_reduce not in ("mean", "sum"):
            raise ValueError("losses.pearson_reduce must be 'mean' or 'sum'")


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


@lru_cache(maxsize=32)
def _filter_matrix(n: int) -> np.ndarray:
    """Matrix form of the normalized 11-tap Gaussian filter (reflect border)."""
    r = SSIM_WINDOW // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    k /= k.sum()
    return correlate1d(np.eye(n), k, axis=0, mode="reflect")


def _blur(img: np.ndarray, fh: np.ndarray, fw: np.ndarray) -> np.ndarray:
    # (H, W, C): rows by fh, columns by fw
    return np.einsum("ij,jkc,lk->ilc", fh, img, fw, optimize=True)


def ssim(pred: np.ndarray, gt: np.ndarray, grad: bool = False):
    """Mean SSIM over pixels and channels; gradient is w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _same_shape(pred, gt)
    squeeze = pred.ndim == 2
    if squeeze:
        pred, gt = pred[..., None], gt[..., None]
    fh, fw = _filter_matrix(pred.shape[0]), _filter_matrix(pred.shape[1])
    mx, my = _blur(pred, fh, fw), _blur(gt, fh, fw)
    sxx = _blur(pred * pred, fh, fw) - mx * mx
    syy = _blur(gt * gt, fh, fw) - my * my
    sxy = _blur(pred * gt, fh, fw) - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    value = float(smap.mean())
    if not grad:
        return value
    n = smap.size
    d_mx = (2 * my * a2) / (b1 * b2) - smap * 2 * mx / b1
    d_sxx = -smap / b2
    d_sxy = 2 * a1 / (b1 * b2)
    # adjoint of the filter is its transpose
    g_mu = _blur(d_mx - 2 * mx * d_sxx - my * d_sxy, fh.T, fw.T)
    g_sq = _blur(d_sxx, fh.T, fw.T)
    g_xy = _blur(d_sxy, fh.T, fw.T)
    g = (g_mu + 2 * pred * g_sq + gt * g_xy) / n
    return value, (g[..., 0] if squeeze else g)


def photometric_loss(pred, gt, weights: LossWeights | None = None, grad: bool = False):
    """``lambda1 * L1 + lambda2 * (1 - SSIM) / 2``."""
    w = weights or LossWeights()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _same_shape(pred, gt)
    diff = pred - gt
    l1 = float(np.abs(diff).mean())
    if not grad:
        return w.lambda1 * l1 + w.lambda2 * (1.0 - ssim(pred, gt)) / 2.0
    s, gs = ssim(pred, gt, grad=True)
    value = w.lambda1 * l1 + w.lambda2 * (1.0 - s) / 2.0
    g = w.lambda1 * np.sign(diff) / diff.size - 0.5 * w.lambda2 * gs
    return value, g


def sparse_depth_l1(rendered, sfm_depth, grad: bool = False):
    rendered = np.asarray(rendered, dtype=np.float64)
    sfm_depth = np.asarray(sfm_depth, dtype=np.float64)
    _same_shape(rendered, sfm_depth)
    mask = (sfm_depth > 0) & (rendered > 0)
    n = int(mask.sum())
    diff = np.where(mask, rendered - sfm_depth, 0.0)
    value = float(np.abs(diff).sum() / n) if n else 0.0
    if not grad:
        return value
    return value, (np.sign(diff) / n if n else np.zeros_like(rendered))


def window_starts(n: int, length: int, stride: int) -> tuple[list[int], int]:
    """Window origins along one axis and the effective window length."""
    if n <= length:
        return [0], n
    starts = list(range(0, n - length + 1, stride))
    if starts[-1] != n - length:
        starts.append(n - length)
    return starts, length


def windowed_pearson_loss(rendered, mono, window_len: int = 32, stride: int = 4,
                          mono_is_inverse: bool = False, reduce: str = "mean",
                          grad: bool = False):
    """Sliding-window ``1 - Pearson(rendered, mono)``, averaged over windows.

    Only valid rendered pixels (> 0) enter a window's statistics. Windows
    with under 25% valid pixels or a near-constant patch are skipped.
    """
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(mono, dtype=np.float64)
    _same_shape(x, y)
    if mono_is_inverse:
        y = -y
    h, w = x.shape
    ys, lh = window_starts(h, window_len, stride)
    xs, lw = window_starts(w, window_len, stride)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    yy, xx = yy.ravel(), xx.ravel()

    valid = x > 0
    pm = sliding_window_view(valid, (lh, lw))[yy, xx].astype(np.float64)
    px = sliding_window_view(x, (lh, lw))[yy, xx] * pm
    py = sliding_window_view(y, (lh, lw))[yy, xx] * pm
    cnt = pm.sum(axis=(1, 2))
    safe = np.maximum(cnt, 1.0)
    mx = px.sum(axis=(1, 2)) / safe
    my = py.sum(axis=(1, 2)) / safe
    xc = (px - mx[:, None, None]) * pm
    yc = (py - my[:, None, None]) * pm
    vx = (xc * xc).sum(axis=(1, 2)) / safe
    vy = (yc * yc).sum(axis=(1, 2)) / safe
    cov = (xc * yc).sum(axis=(1, 2)) / safe
    use = (cnt >= MIN_WINDOW_VALID * lh * lw) & (vx >= MIN_WINDOW_VAR) & (vy >= MIN_WINDOW_VAR)
    sx = np.sqrt(np.where(use, vx, 1.0))
    sy = np.sqrt(np.where(use, vy, 1.0))
    r = np.where(use, cov / (sx * sy), 1.0)
    n_used = int(use.sum())
    denom = float(max(n_used, 1)) if reduce == "mean" else 1.0
    value = float(np.sum(1.0 - r[use]) / denom) if n_used else 0.0
    if not grad:
        return value
    g = np.zeros_like(x)
    if n_used:
        coef = 1.0 / (safe * sx * sy)
        gw = -(coef[:, None, None] * (yc - (r * sy / sx)[:, None, None] * xc)) * pm / denom
        for i in np.flatnonzero(use):
            g[yy[i]:yy[i] + lh, xx[i]:xx[i] + lw] += gw[i]
    return value, g


def opacity_regularization(render_out, lambda_o: float = 0.05, grad: bool = False):
    """``lambda_o / N * sum |alpha_n|`` over non-maximum-weight hits.

    The gradient is per-pixel and feeds the rasterizer's ``grad_nonmax``.
    """
    n = int(np.sum(render_out.nonmax_count))
    total = float(np.sum(render_out.nonmax_alpha_sum))
    value = lambda_o * total / max(n, 1) if n else 0.0
    if not grad:
        return value
    shape = render_out.nonmax_alpha_sum.shape
    return value, np.full(shape, lambda_o / max(n, 1) if n else 0.0)


@dataclass
class LossTerms:
    total: float
    terms: dict = field(default_factory=dict)
    grad_color: np.ndarray | None = None
    grad_depth: np.ndarray | None = None
    grad_nonmax: np.ndarray | None = None


def total_loss(pred_img, gt_img, render_out, sfm_depth, mono_depth, weights: LossWeights,
               view_kind: str = "training", mono_is_inverse: bool = False) -> LossTerms:
    """Full objective for one view with gradients for the rasterizer.

    Training views: photometric + depth alignment + opacity regularization.
    Pseudo views: depth alignment only.
    """
    if view_kind not in ("training", "pseudo"):
        raise ValueError(f"unknown view kind {view_kind!r}")
    h, w = render_out.depth.shape
    g_color = np.zeros((h, w, 3))
    g_depth = np.zeros((h, w))
    g_nonmax = np.zeros((h, w))
    terms = {"l1": 0.0, "dssim": 0.0, "depth_l1": 0.0, "pearson": 0.0, "opacity": 0.0}
    wt = weights

    if view_kind == "training":
        if gt_img is None:
            raise ValueError("training view needs a ground-truth image")
        pred = np.asarray(pred_img, dtype=np.float64)
        gt = np.asarray(gt_img, dtype=np.float64)
        _same_shape(pred, gt)
        diff = pred - gt
        terms["l1"] = wt.lambda1 * float(np.abs(diff).mean())
        g_color += wt.lambda1 * np.sign(diff) / diff.size
        if wt.lambda2 > 0:
            s, gs = ssim(pred, gt, grad=True)
            terms["dssim"] = wt.lambda2 * (1.0 - s) / 2.0
            g_color -= 0.5 * wt.lambda2 * gs
        if wt.lambda_o > 0:
            terms["opacity"], g_nonmax = opacity_regularization(render_out, wt.lambda_o, grad=True)

    if wt.lambda_d > 0 and sfm_depth is not None:
        v, g = sparse_depth_l1(render_out.depth, sfm_depth, grad=True)
        terms["depth_l1"] = wt.lambda_d * v
        g_depth += wt.lambda_d * g
    if wt.lambda_p > 0:
        if mono_depth is None:
            raise ValueError("mono depth required")
        v, g = windowed_pearson_loss(render_out.depth, mono_depth, wt.window_len,
                                     wt.window_stride, mono_is_inverse, wt.pearson_reduce,
                                     grad=True)
        terms["pearson"] = wt.lambda_p * v
        g_depth += wt.lambda_p * g

    total = 0.0
    for k in ("l1", "dssim", "depth_l1", "pearson", "opacity"):
        total += terms[k]
    return LossTerms(total, terms, g_color, g_depth, g_nonmax)


def psnr(pred, gt) -> float:
    """PSNR for unit-range images; the 99 dB sentinel stands in for +inf."""
    mse = float(np.mean((np.asarray(pred, float) - np.asarray(gt, float)) ** 2))
    if mse <= 0:
        return 99.0
    return float(min(10.0 * np.log10(1.0 / mse), 99.0))


def weights_as_dict(w: LossWeights) -> dict:
    return {f.name: getattr(w, f.name) for f in fields(w)}
