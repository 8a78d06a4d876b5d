"""Pure-numpy blending: loops over depth-sorted splats, vectorized over each
splat's bounding-box pixels. Same contract as ``blend_numba``."""
import numpy as np

from ._constants import ACC_VALID, ALPHA_MAX, ALPHA_MIN, DEPTH_EPS, N_GRAD, T_MIN


def _sweep(means2d, conics, opac, colors, depths, boxes, width, height, keep_stash):
    t = np.ones((height, width))
    done = np.zeros((height, width), dtype=bool)
    csum = np.zeros((height, width, 3))
    dsum = np.zeros((height, width))
    best = np.full((height, width), -1, dtype=np.int64)
    bestw = np.zeros((height, width))
    besta = np.zeros((height, width))
    asum = np.zeros((height, width))
    cnt = np.zeros((height, width), dtype=np.int64)
    stash = []
    for k in range(means2d.shape[0]):
        x0, y0, x1, y1 = boxes[k]
        if x0 > x1 or y0 > y1:
            continue
        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        dx = np.arange(x0, x1 + 1)[None, :] - means2d[k, 0]
        dy = np.arange(y0, y1 + 1)[:, None] - means2d[k, 1]
        power = -0.5 * (conics[k, 0] * dx * dx + conics[k, 2] * dy * dy) - conics[k, 1] * dx * dy
        g = np.exp(power)
        alpha = np.minimum(ALPHA_MAX, opac[k] * g)
        ok = (power <= 0.0) & (alpha >= ALPHA_MIN) & ~done[sl]
        if not ok.any():
            continue
        tb = t[sl].copy()
        test_t = tb * (1.0 - alpha)
        term = ok & (test_t < T_MIN)
        done[sl] |= term
        contrib = ok & ~term
        w = np.where(contrib, alpha * tb, 0.0)
        csum[sl] += colors[k] * w[..., None]
        dsum[sl] += depths[k] * w
        upd = contrib & (w > bestw[sl])
        best[sl] = np.where(upd, k, best[sl])
        besta[sl] = np.where(upd, alpha, besta[sl])
        bestw[sl] = np.where(upd, w, bestw[sl])
        asum[sl] += np.where(contrib, alpha, 0.0)
        cnt[sl] += contrib
        t[sl] = np.where(contrib, test_t, tb)
        if keep_stash:
            stash.append((k, sl, contrib, alpha, g, tb, dx, dy))
    return t, csum, dsum, best, bestw, besta, asum, cnt, stash


def blend_forward(means2d, conics, opac, colors, depths, boxes, width, height, bg):
    t, csum, dsum, best, bestw, besta, asum, cnt, _ = _sweep(
        means2d, conics, opac, colors, depths, boxes, width, height, False)
    color = csum + t[..., None] * np.asarray(bg, dtype=np.float64)
    accum = 1.0 - t
    valid = accum >= ACC_VALID
    depth = np.where(valid, dsum / np.maximum(accum, DEPTH_EPS), 0.0)
    multi = cnt > 1
    nm_sum = np.where(multi, asum - besta, 0.0)
    nm_cnt = np.where(multi, cnt - 1, 0)
    return color, depth, accum, t, best, bestw, nm_sum, nm_cnt


def blend_backward(means2d, conics, opac, colors, depths, boxes, width, height, bg,
                   grad_color, grad_depth, grad_nonmax):
    t, csum, dsum, best, _, _, _, _, stash = _sweep(
        means2d, conics, opac, colors, depths, boxes, width, height, True)
    out = np.zeros((means2d.shape[0], N_GRAD))
    a = 1.0 - t
    valid = a >= ACC_VALID
    dval = np.where(valid, dsum / np.maximum(a, DEPTH_EPS), 0.0)
    gd_over_a = np.where(valid, grad_depth / np.maximum(a, DEPTH_EPS), 0.0)
    s = (grad_color @ np.asarray(bg, dtype=np.float64)) * t
    for k, sl, contrib, alpha, g, tb, dx, dy in reversed(stash):
        w = np.where(contrib, alpha * tb, 0.0)
        gc = grad_color[sl]
        gw = gc @ colors[k] + gd_over_a[sl] * (depths[k] - dval[sl])
        out[k, 9] = np.sum(gd_over_a[sl] * w)
        out[k, 6:9] = np.einsum("ijc,ij->c", gc, w)
        dalpha = tb * gw - s[sl] / (1.0 - alpha) + np.where(best[sl] != k, grad_nonmax[sl], 0.0)
        s[sl] = np.where(contrib, s[sl] + gw * w, s[sl])
        live = contrib & (opac[k] * g <= ALPHA_MAX)
        da = np.where(live, dalpha, 0.0)
        out[k, 5] = np.sum(da * g)
        dpow = da * alpha
        out[k, 0] = np.sum(dpow * (conics[k, 0] * dx + conics[k, 1] * dy))
        out[k, 1] = np.sum(dpow * (conics[k, 1] * dx + conics[k, 2] * dy))
        out[k, 2] = np.sum(-0.5 * dpow * dx * dx)
        out[k, 3] = np.sum(-dpow * dx * dy)
        out[k, 4] = np.sum(-0.5 * dpow * dy * dy)
    return out
