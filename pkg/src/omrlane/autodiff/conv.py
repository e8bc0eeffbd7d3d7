"""Spatial ops on (C,H,W) or batched (N,C,H,W) maps."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from omrlane.autodiff.tensor import Tensor, as_tensor, make_op, note_branch, relu
from omrlane.errors import DimensionError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(op, "(C,H,W) or (N,C,H,W)", x.shape)


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # (N,C,Hp,Wp) -> (N,OH,OW,C,k,k)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; output spatial size (H + 2 pad - k) // stride + 1."""
    kernel = as_tensor(kernel)
    xd, squeeze = _batched(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError("conv2d", "kernel (C_out,C_in,k,k)", kernel.shape)
    c_out, c_in, k, _ = kernel.shape
    if k % 2 == 0:
        raise DimensionError("conv2d", "odd kernel size", k)
    if xd.shape[1] != c_in:
        raise DimensionError("conv2d", f"{c_in} input channels", xd.shape[1])
    if stride < 1 or pad < 0:
        raise ValueError("conv2d needs stride >= 1 and pad >= 0")
    n, _, h, w = xd.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, k, stride, oh, ow).reshape(n * oh * ow, c_in * k * k)
    kmat = kernel.data.reshape(c_out, -1)
    out = cols @ kmat.T
    if bias is not None:
        out = out + bias.data.reshape(1, c_out)
    out = out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(n, oh, ow, c_in, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            if squeeze:
                gx = gx[0]
        if bias is None:
            return gx, gk
        gb = gmat.sum(axis=0).reshape(bias.shape) if bias.requires_grad else None
        return gx, gk, gb

    return make_op(out, parents, back)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix for align-corners-false linear interpolation along one axis."""
    mat = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize", "output size >= 1", (out_h, out_w))
    if x.ndim not in (3, 4):
        raise DimensionError("bilinear_resize", "(C,H,W) or (N,C,H,W)", x.shape)
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make_op(x.data.copy(), (x,), lambda g: (g,))
    rh = _interp_matrix(h, out_h)
    rw = _interp_matrix(w, out_w)
    out = np.einsum("ah,...hw,bw->...ab", rh, x.data, rw, optimize=True)
    return make_op(out, (x,), lambda g: (np.einsum("ah,...ab,bw->...hw", rh, g, rw, optimize=True),))


class RunningStats:
    """Per-channel running mean/variance buffers for batch norm."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def update(self, batch_mean: np.ndarray, batch_var_unbiased: np.ndarray) -> None:
        self.mean = (1 - BN_MOMENTUM) * self.mean + BN_MOMENTUM * batch_mean
        self.var = (1 - BN_MOMENTUM) * self.var + BN_MOMENTUM * batch_var_unbiased


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats | None, training: bool) -> Tensor:
    xd, squeeze = _batched(x, "batchnorm")
    c = xd.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("batchnorm", f"gamma/beta of shape ({c},)", (gamma.shape, beta.shape))
    shape = (1, c, 1, 1)
    if training or stats is None:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        count = xd.size // c
        if training and stats is not None:
            stats.update(mu, var * count / max(count - 1, 1))
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (xd - mu.reshape(shape)) * inv.reshape(shape)
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def back(g):
            g4 = g[None] if squeeze else g
            gg = (g4 * xhat).sum(axis=(0, 2, 3))
            gb = g4.sum(axis=(0, 2, 3))
            gx = None
            if x.requires_grad:
                gxhat = g4 * gamma.data.reshape(shape)
                gx = inv.reshape(shape) / count * (
                    count * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
                if squeeze:
                    gx = gx[0]
            return gx, gg, gb
    else:
        inv = 1.0 / np.sqrt(stats.var + BN_EPS)
        xhat = (xd - stats.mean.reshape(shape)) * inv.reshape(shape)
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def back(g):
            g4 = g[None] if squeeze else g
            gx = g4 * (gamma.data * inv).reshape(shape)
            return (gx[0] if squeeze else gx), (g4 * xhat).sum(axis=(0, 2, 3)), g4.sum(axis=(0, 2, 3))

    if squeeze:
        out = out[0]
    return make_op(out, (x, gamma, beta), back)


def batchnorm_relu(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats | None, training: bool) -> Tensor:
    return relu(batchnorm(x, gamma, beta, stats, training))


# ---- modulated deformable convolution ---------------------------------------
DEFORM_K = 5
DEFORM_TAPS = DEFORM_K * DEFORM_K


def _sampling_matrices(py: np.ndarray, px: np.ndarray, h: int, w: int, n: int):
    """Sparse bilinear sampling operator plus its derivatives w.r.t. the sample position.

    `py`, `px` have shape (n, P, T) for P output pixels and T taps. Row
    r = (b*P + p)*T + t of each matrix maps the flattened (n*h*w) feature
    rows to one sample; corners outside the map carry zero weight.
    """
    y0f = np.floor(py)
    x0f = np.floor(px)
    ly = (py - y0f).reshape(-1)
    lx = (px - x0f).reshape(-1)
    y0 = y0f.astype(np.int64).reshape(-1)
    x0 = x0f.astype(np.int64).reshape(-1)
    rows = y0.size
    batch = np.repeat(np.arange(n) * (h * w), rows // n)
    idx = np.empty((rows, 4), dtype=np.int64)
    wgt = np.empty((rows, 4))
    wdy = np.empty((rows, 4))
    wdx = np.empty((rows, 4))
    for j, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        yc = y0 + dy
        xc = x0 + dx
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        wy = ly if dy else 1.0 - ly
        wx = lx if dx else 1.0 - lx
        idx[:, j] = batch + np.clip(yc, 0, h - 1) * w + np.clip(xc, 0, w - 1)
        wgt[:, j] = wy * wx * valid
        wdy[:, j] = (1.0 if dy else -1.0) * wx * valid
        wdx[:, j] = wy * (1.0 if dx else -1.0) * valid
    indptr = np.arange(0, 4 * rows + 1, 4)
    shape = (rows, n * h * w)
    flat_idx = idx.reshape(-1)

    def mat(values):
        return sparse.csr_matrix((values.reshape(-1), flat_idx, indptr), shape=shape)

    return (y0, x0), mat(wgt), mat(wdy), mat(wdx)


def deform_conv(feature: Tensor, offsets: Tensor, modulation: Tensor, kernel: Tensor) -> Tensor:
    """5x5 modulated deformable convolution, stride 1, same-size output.

    Tap t = 5*a + b sits at base offset (a-2, b-2); its learned displacement is
    (offsets[2t], offsets[2t+1]) = (dy, dx). Samples outside the map read zero.
    """
    fd, squeeze = _batched(feature, "deform_conv")
    od = offsets.data[None] if offsets.ndim == 3 else offsets.data
    md = modulation.data[None] if modulation.ndim == 3 else modulation.data
    n, c, h, w = fd.shape
    if od.shape != (n, 2 * DEFORM_TAPS, h, w):
        raise DimensionError("deform_conv", f"offsets {(n, 2 * DEFORM_TAPS, h, w)}", od.shape)
    if md.shape != (n, DEFORM_TAPS, h, w):
        raise DimensionError("deform_conv", f"modulation {(n, DEFORM_TAPS, h, w)}", md.shape)
    if kernel.ndim != 4 or kernel.shape[1:] != (c, DEFORM_K, DEFORM_K):
        raise DimensionError("deform_conv", f"kernel (C_out,{c},5,5)", kernel.shape)
    c_out = kernel.shape[0]
    hw = h * w
    taps = DEFORM_TAPS

    base = np.arange(DEFORM_K) - DEFORM_K // 2
    tap_dy = np.repeat(base, DEFORM_K)
    tap_dx = np.tile(base, DEFORM_K)
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # (n, hw, taps) layout: pixel-major, tap-minor
    py = gy.reshape(1, hw, 1) + tap_dy + od[:, 0::2].reshape(n, taps, hw).transpose(0, 2, 1)
    px = gx.reshape(1, hw, 1) + tap_dx + od[:, 1::2].reshape(n, taps, hw).transpose(0, 2, 1)
    cells, samp, samp_dy, samp_dx = _sampling_matrices(py, px, h, w, n)
    note_branch(cells[0])
    note_branch(cells[1])

    feat_rows = fd.transpose(0, 2, 3, 1).reshape(n * hw, c)
    samples = samp @ feat_rows                                  # (n*hw*taps, c)
    mod_rows = md.reshape(n, taps, hw).transpose(0, 2, 1).reshape(-1, 1)
    cols = (samples * mod_rows).reshape(n * hw, taps * c)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(c_out, taps * c)
    out = (cols @ kmat.T).reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def back(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * hw, c_out)
        gk = None
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(c_out, DEFORM_K, DEFORM_K, c).transpose(0, 3, 1, 2)
        dcols = (gmat @ kmat).reshape(-1, c)
        gm = go = gf = None
        if modulation.requires_grad:
            gm = (dcols * samples).sum(axis=1).reshape(n, h, w, taps).transpose(0, 3, 1, 2)
            gm = gm[0] if squeeze else gm
        dsamp = dcols * mod_rows
        if feature.requires_grad:
            gf = (samp.T @ dsamp).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            gf = gf[0] if squeeze else gf
        if offsets.requires_grad:
            gdy = (dsamp * (samp_dy @ feat_rows)).sum(axis=1).reshape(n, h, w, taps).transpose(0, 3, 1, 2)
            gdx = (dsamp * (samp_dx @ feat_rows)).sum(axis=1).reshape(n, h, w, taps).transpose(0, 3, 1, 2)
            go = np.empty((n, 2 * taps, h, w))
            go[:, 0::2] = gdy
            go[:, 1::2] = gdx
            go = go[0] if squeeze else go
        return gf, go, gm, gk

    return make_op(out, (feature, offsets, modulation, kernel), back)
