"""Slow, independent reference implementations used only by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np


def conv2d_loops(x, k, b=None, stride=1, pad=0):
    """Direct six-loop convolution of one (C_in,H,W) image."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            yy = i * stride + u - pad
                            xx = j * stride + v - pad
                            if 0 <= yy < h and 0 <= xx < w:
                                acc += x[c, yy, xx] * k[o, c, u, v]
                out[o, i, j] = acc
    return out


def bilinear_pixel(img, out_h, out_w, i, j):
    """One output pixel of an align-corners-false resize with edge clamping."""
    h, w = img.shape
    sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
    sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
    y0, x0 = int(math.floor(sy)), int(math.floor(sx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x1]
            + fy * (1 - fx) * img[y1, x0] + fy * fx * img[y1, x1])


def sample_zero_exterior(img, y, x):
    """Bilinear read at a real-valued location; taps outside the image contribute zero."""
    h, w = img.shape
    y0, x0 = math.floor(y), math.floor(x)
    total = 0.0
    for yy, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * img[yy, xx]
    return total


def deform_conv_loops(feat, offsets, modulation, kernel):
    """5x5 modulated deformable convolution, channel 2t = dy and 2t+1 = dx for tap t."""
    c, h, w = feat.shape
    c_out = kernel.shape[0]
    out = np.zeros((c_out, h, w))
    for i in range(h):
        for j in range(w):
            for t in range(25):
                u, v = divmod(t, 5)
                y = i + u - 2 + offsets[2 * t, i, j]
                x = j + v - 2 + offsets[2 * t + 1, i, j]
                m = modulation[t, i, j]
                for ci in range(c):
                    s = sample_zero_exterior(feat[ci], y, x) * m
                    for o in range(c_out):
                        out[o, i, j] += kernel[o, ci, u, v] * s
    return out


def lane_x_at_row(xs, sample_rows, y, valid):
    """Scalar linear interpolation of the lane's image x at image row y, or None off the span."""
    lo, hi = valid
    if y < sample_rows[lo] or y > sample_rows[hi]:
        return None
    for k in range(lo, hi):
        if sample_rows[k] <= y <= sample_rows[k + 1]:
            f = (y - sample_rows[k]) / (sample_rows[k + 1] - sample_rows[k])
            return xs[k] + f * (xs[k + 1] - xs[k])
    return float(xs[hi])


def stripe_pixels(xs, sample_rows, grid_h, grid_w, image_h, image_w, width, valid):
    """Set of (row, col) grid cells whose center lies within width/2 of the lane."""
    cells = set()
    for r in range(grid_h):
        y = (r + 0.5) * image_h / grid_h - 0.5
        x = lane_x_at_row(xs, sample_rows, y, valid)
        if x is None:
            continue
        xg = (x + 0.5) * grid_w / image_w - 0.5
        for c in range(grid_w):
            if abs(c - xg) < width / 2:
                cells.add((r, c))
    return cells


def pixel_set_iou(a: set, b: set) -> float:
    union = len(a | b)
    return 0.0 if union == 0 else len(a & b) / union


def interval_liou(p, g, e, rows=None):
    """Row-wise segment arithmetic: overlap min(ends)-max(starts), union max(ends)-min(starts)."""
    num = den = 0.0
    for k in range(len(p)):
        if rows is not None and not rows[k]:
            continue
        s1, e1 = p[k] - e, p[k] + e
        s2, e2 = g[k] - e, g[k] + e
        num += min(e1, e2) - max(s1, s2)
        den += max(e1, e2) - min(s1, s2)
    return num / den


def nms_sort_scan(P, C, U, cfg, stripe_fn):
    """Visit pixels in descending probability (ties by raster order); keep a pixel when no kept
    lane's dilated stripe covers it. `stripe_fn(xs)` returns a set of covered cells."""
    H, W = P.shape
    order = sorted(((P[r, c], r * W + c) for r in range(H) for c in range(W)), key=lambda t: (-t[0], t[1]))
    suppressed: set = set()
    kept = []
    for p, flat in order:
        if len(kept) >= cfg.nms_max_lanes or not p > cfg.nms_threshold:
            break
        r, c = divmod(flat, W)
        if (r, c) in suppressed:
            continue
        xs = U @ C[:, r, c]
        kept.append((r, c, xs, p))
        suppressed |= stripe_fn(xs)
        suppressed.add((r, c))
    return kept


def max_matching_size(iou, threshold=0.5):
    """Largest one-to-one assignment using only pairs above the threshold (exhaustive)."""
    n_p, n_g = iou.shape
    best = 0
    for perm in itertools.permutations(range(max(n_p, n_g)), n_g):
        count = sum(1 for j, i in enumerate(perm) if i < n_p and iou[i, j] > threshold)
        best = max(best, count)
    return best


def nearest_lane_owner(dists):
    """Per-cell argmin over lanes with ties to the lower index; -1 where no lane is finite."""
    L, H, W = dists.shape
    owner = np.full((H, W), -1)
    for r in range(H):
        for c in range(W):
            best, arg = math.inf, -1
            for k in range(L):
                if dists[k, r, c] < best:
                    best, arg = dists[k, r, c], k
            owner[r, c] = arg
    return owner
