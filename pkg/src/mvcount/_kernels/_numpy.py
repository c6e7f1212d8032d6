"""Pure-numpy implementations of the hot kernels.

Same contracts as the compiled extension in ``_core.pyx``; selected at import
time when the extension is unavailable (or forced via MVCOUNT_BACKEND=numpy).
All operands are float64; convolutions are same-size with zero padding and odd
kernel dims; bilinear resampling zero-pads out-of-bounds reads.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_fwd(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    cout, cin, kh, kw = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (cin, h, w, kh, kw)
    return np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))


def conv2d_bwd_x(gy: np.ndarray, w: np.ndarray) -> np.ndarray:
    cout, cin, kh, kw = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    gp = np.pad(gy, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(gp, (kh, kw), axis=(1, 2))  # (cout, h, w, kh, kw)
    wf = w[:, :, ::-1, ::-1]
    return np.tensordot(wf, win, axes=([0, 2, 3], [0, 3, 4]))


def conv2d_bwd_w(x: np.ndarray, gy: np.ndarray, kh: int, kw: int) -> np.ndarray:
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (cin, h, w, kh, kw)
    return np.tensordot(gy, win, axes=([1, 2], [1, 2]))


def maxpool2_fwd(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.full((c, 2 * ho, 2 * wo), -np.inf)
    xp[:, :h, :w] = x
    blocks = xp.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    sub = blocks.argmax(axis=3)
    y = np.take_along_axis(blocks, sub[..., None], axis=3)[..., 0]
    # flat source index into the unpadded (h, w) raster
    rr = 2 * np.arange(ho)[:, None] + sub // 2
    cc = 2 * np.arange(wo)[None, :] + sub % 2
    idx = rr * w + cc
    return y, idx.astype(np.int64)


def maxpool2_bwd(gy: np.ndarray, idx: np.ndarray, h: int, w: int) -> np.ndarray:
    c = gy.shape[0]
    gx = np.zeros((c, h * w))
    for ch in range(c):
        np.add.at(gx[ch], idx[ch].ravel(), gy[ch].ravel())
    return gx.reshape(c, h, w)


def _corners(rows, cols, valid, h, w):
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ri, ci = r0 + dr, c0 + dc
        inb = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w) & valid
        wr = fr if dr else 1.0 - fr
        wc = fc if dc else 1.0 - fc
        out.append((np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1), wr * wc * inb))
    return out


def bilinear_gather(src: np.ndarray, rows: np.ndarray, cols: np.ndarray, valid: np.ndarray) -> np.ndarray:
    c, h, w = src.shape
    dst = np.zeros((c,) + rows.shape)
    for ri, ci, wgt in _corners(rows, cols, valid.astype(bool), h, w):
        dst += src[:, ri, ci] * wgt
    return dst


def bilinear_scatter(gdst: np.ndarray, rows: np.ndarray, cols: np.ndarray, valid: np.ndarray, h: int, w: int) -> np.ndarray:
    c = gdst.shape[0]
    gsrc = np.zeros((c, h, w))
    for ri, ci, wgt in _corners(rows, cols, valid.astype(bool), h, w):
        flat = (ri * w + ci).ravel()
        contrib = gdst * wgt
        for ch in range(c):
            np.add.at(gsrc[ch].reshape(-1), flat, contrib[ch].ravel())
    return gsrc
