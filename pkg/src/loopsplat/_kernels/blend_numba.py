"""Per-pixel front-to-back blending, compiled with numba.

Splats arrive sorted by depth. Rows are pre-binned against each splat's
integer bounding box; the backward pass privatizes per-Gaussian gradients
into a fixed number of row chunks and reduces them in chunk order, so the
result does not depend on the thread count.
"""
import numpy as np
from numba import njit, prange

from ._constants import ACC_VALID, ALPHA_MAX, ALPHA_MIN, DEPTH_EPS, N_CHUNKS, T_MIN, N_GRAD


@njit(cache=True)
def _row_bin(boxes, py, out):
    n = 0
    for k in range(boxes.shape[0]):
        if boxes[k, 1] <= py and py <= boxes[k, 3]:
            out[n] = k
            n += 1
    return n


@njit(parallel=True, cache=True)
def blend_forward(means2d, conics, opac, colors, depths, boxes, width, height, bg):
    m = means2d.shape[0]
    color = np.empty((height, width, 3))
    depth = np.zeros((height, width))
    accum = np.zeros((height, width))
    tfinal = np.ones((height, width))
    maxidx = np.full((height, width), -1, dtype=np.int64)
    maxw = np.zeros((height, width))
    nm_sum = np.zeros((height, width))
    nm_cnt = np.zeros((height, width), dtype=np.int64)
    for py in prange(height):
        row = np.empty(m, dtype=np.int64)
        nrow = _row_bin(boxes, py, row)
        for px in range(width):
            t = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            dsum = 0.0
            best = -1
            bestw = 0.0
            besta = 0.0
            asum = 0.0
            cnt = 0
            for r in range(nrow):
                k = row[r]
                if px < boxes[k, 0] or px > boxes[k, 2]:
                    continue
                dx = px - means2d[k, 0]
                dy = py - means2d[k, 1]
                power = -0.5 * (conics[k, 0] * dx * dx + conics[k, 2] * dy * dy) \
                    - conics[k, 1] * dx * dy
                if power > 0.0:
                    continue
                alpha = min(ALPHA_MAX, opac[k] * np.exp(power))
                if alpha < ALPHA_MIN:
                    continue
                test_t = t * (1.0 - alpha)
                if test_t < T_MIN:
                    break
                w = alpha * t
                c0 += colors[k, 0] * w
                c1 += colors[k, 1] * w
                c2 += colors[k, 2] * w
                dsum += depths[k] * w
                if w > bestw:
                    best = k
                    bestw = w
                    besta = alpha
                asum += alpha
                cnt += 1
                t = test_t
            color[py, px, 0] = c0 + t * bg[0]
            color[py, px, 1] = c1 + t * bg[1]
            color[py, px, 2] = c2 + t * bg[2]
            a = 1.0 - t
            accum[py, px] = a
            tfinal[py, px] = t
            if a >= ACC_VALID:
                depth[py, px] = dsum / max(a, DEPTH_EPS)
            maxidx[py, px] = best
            maxw[py, px] = bestw
            if cnt > 1:
                nm_sum[py, px] = asum - besta
                nm_cnt[py, px] = cnt - 1
    return color, depth, accum, tfinal, maxidx, maxw, nm_sum, nm_cnt


@njit(cache=True)
def _backward_rows(means2d, conics, opac, colors, depths, boxes, width, y0, y1, bg,
                   grad_color, grad_depth, grad_nonmax, acc):
    m = means2d.shape[0]
    row = np.empty(m, dtype=np.int64)
    ks = np.empty(m, dtype=np.int64)
    als = np.empty(m)
    ts = np.empty(m)
    gs = np.empty(m)
    for py in range(y0, y1):
        nrow = _row_bin(boxes, py, row)
        for px in range(width):
            gc0 = grad_color[py, px, 0]
            gc1 = grad_color[py, px, 1]
            gc2 = grad_color[py, px, 2]
            gd = grad_depth[py, px]
            gn = grad_nonmax[py, px]
            if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0 and gn == 0.0:
                continue
            # replay the forward pass to recover the contributor list
            t = 1.0
            n = 0
            dsum = 0.0
            best = -1
            bestw = 0.0
            for r in range(nrow):
                k = row[r]
                if px < boxes[k, 0] or px > boxes[k, 2]:
                    continue
                dx = px - means2d[k, 0]
                dy = py - means2d[k, 1]
                power = -0.5 * (conics[k, 0] * dx * dx + conics[k, 2] * dy * dy) \
                    - conics[k, 1] * dx * dy
                if power > 0.0:
                    continue
                g = np.exp(power)
                alpha = min(ALPHA_MAX, opac[k] * g)
                if alpha < ALPHA_MIN:
                    continue
                test_t = t * (1.0 - alpha)
                if test_t < T_MIN:
                    break
                w = alpha * t
                if w > bestw:
                    best = n
                    bestw = w
                ks[n] = k
                als[n] = alpha
                ts[n] = t
                gs[n] = g
                dsum += depths[k] * w
                n += 1
                t = test_t
            if n == 0:
                continue
            a = 1.0 - t
            valid = a >= ACC_VALID
            dval = dsum / max(a, DEPTH_EPS) if valid else 0.0
            s = (gc0 * bg[0] + gc1 * bg[1] + gc2 * bg[2]) * t
            for idx in range(n - 1, -1, -1):
                k = ks[idx]
                alpha = als[idx]
                tk = ts[idx]
                w = alpha * tk
                gw = gc0 * colors[k, 0] + gc1 * colors[k, 1] + gc2 * colors[k, 2]
                if valid:
                    gw += gd * (depths[k] - dval) / a
                    acc[k, 9] += gd * w / a
                acc[k, 6] += gc0 * w
                acc[k, 7] += gc1 * w
                acc[k, 8] += gc2 * w
                dalpha = tk * gw - s / (1.0 - alpha)
                if idx != best:
                    dalpha += gn
                s += gw * w
                if opac[k] * gs[idx] > ALPHA_MAX:
                    continue
                acc[k, 5] += dalpha * gs[idx]
                dpow = dalpha * alpha
                dx = px - means2d[k, 0]
                dy = py - means2d[k, 1]
                acc[k, 0] += dpow * (conics[k, 0] * dx + conics[k, 1] * dy)
                acc[k, 1] += dpow * (conics[k, 1] * dx + conics[k, 2] * dy)
                acc[k, 2] += -0.5 * dpow * dx * dx
                acc[k, 3] += -dpow * dx * dy
                acc[k, 4] += -0.5 * dpow * dy * dy


@njit(parallel=True, cache=True)
def blend_backward(means2d, conics, opac, colors, depths, boxes, width, height, bg,
                   grad_color, grad_depth, grad_nonmax):
    m = means2d.shape[0]
    nch = min(N_CHUNKS, height)
    acc = np.zeros((nch, m, N_GRAD))
    for c in prange(nch):
        y0 = (c * height) // nch
        y1 = ((c + 1) * height) // nch
        _backward_rows(means2d, conics, opac, colors, depths, boxes, width, y0, y1, bg,
                       grad_color, grad_depth, grad_nonmax, acc[c])
    out = np.zeros((m, N_GRAD))
    for c in range(nch):
        out += acc[c]
    return out
