# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: same-size conv2d (fwd/bwd), 2x2 ceil max-pooling,
and bilinear gather/scatter along precomputed coordinate fields.

Contracts mirror mvcount._kernels._numpy exactly.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def conv2d_fwd(double[:, :, ::1] x, double[:, :, :, ::1] w):
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ph = (kh - 1) // 2, pw = (kw - 1) // 2
    y_arr = np.zeros((cout, h, wd))
    cdef double[:, :, ::1] y = y_arr
    cdef Py_ssize_t o, ci, ky, kx, i, j, si, j0, j1, off
    cdef double wv
    for o in range(cout):
        for ci in range(cin):
            for ky in range(kh):
                for kx in range(kw):
                    wv = w[o, ci, ky, kx]
                    if wv == 0.0:
                        continue
                    off = kx - pw
                    j0 = 0 if off >= 0 else -off
                    j1 = wd if off <= 0 else wd - off
                    for i in range(h):
                        si = i + ky - ph
                        if si < 0 or si >= h:
                            continue
                        for j in range(j0, j1):
                            y[o, i, j] += wv * x[ci, si, j + off]
    return y_arr


def conv2d_bwd_x(double[:, :, ::1] gy, double[:, :, :, ::1] w):
    cdef Py_ssize_t cout = gy.shape[0], h = gy.shape[1], wd = gy.shape[2]
    cdef Py_ssize_t cin = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ph = (kh - 1) // 2, pw = (kw - 1) // 2
    gx_arr = np.zeros((cin, h, wd))
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t o, ci, ky, kx, i, j, si, j0, j1, off
    cdef double wv
    for o in range(cout):
        for ci in range(cin):
            for ky in range(kh):
                for kx in range(kw):
                    wv = w[o, ci, ky, kx]
                    if wv == 0.0:
                        continue
                    off = pw - kx
                    j0 = 0 if off >= 0 else -off
                    j1 = wd if off <= 0 else wd - off
                    for i in range(h):
                        si = i + ph - ky
                        if si < 0 or si >= h:
                            continue
                        for j in range(j0, j1):
                            gx[ci, i, j] += wv * gy[o, si, j + off]
    return gx_arr


def conv2d_bwd_w(double[:, :, ::1] x, double[:, :, ::1] gy, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t cout = gy.shape[0]
    cdef Py_ssize_t ph = (kh - 1) // 2, pw = (kw - 1) // 2
    gw_arr = np.zeros((cout, cin, kh, kw))
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t o, ci, ky, kx, i, j, si, j0, j1, off
    cdef double acc
    for o in range(cout):
        for ci in range(cin):
            for ky in range(kh):
                for kx in range(kw):
                    off = kx - pw
                    j0 = 0 if off >= 0 else -off
                    j1 = wd if off <= 0 else wd - off
                    acc = 0.0
                    for i in range(h):
                        si = i + ky - ph
                        if si < 0 or si >= h:
                            continue
                        for j in range(j0, j1):
                            acc += gy[o, i, j] * x[ci, si, j + off]
                    gw[o, ci, ky, kx] = acc
    return gw_arr


def maxpool2_fwd(double[:, :, ::1] x):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t ho = (h + 1) // 2, wo = (wd + 1) // 2
    y_arr = np.empty((c, ho, wo))
    idx_arr = np.empty((c, ho, wo), dtype=np.int64)
    cdef double[:, :, ::1] y = y_arr
    cdef long long[:, :, ::1] idx = idx_arr
    cdef Py_ssize_t ch, i, j, r, cc, br, bc, bi, bj
    cdef double best, v
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                best = x[ch, 2 * i, 2 * j]
                bi = 2 * i
                bj = 2 * j
                for br in range(2):
                    r = 2 * i + br
                    if r >= h:
                        break
                    for bc in range(2):
                        cc = 2 * j + bc
                        if cc >= wd:
                            break
                        v = x[ch, r, cc]
                        if v > best:
                            best = v
                            bi = r
                            bj = cc
                y[ch, i, j] = best
                idx[ch, i, j] = bi * wd + bj
    return y_arr, idx_arr


def maxpool2_bwd(double[:, :, ::1] gy, long long[:, :, ::1] idx, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t c = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2]
    gx_arr = np.zeros((c, h * w))
    cdef double[:, ::1] gx = gx_arr
    cdef Py_ssize_t ch, i, j
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                gx[ch, idx[ch, i, j]] += gy[ch, i, j]
    return gx_arr.reshape(c, h, w)


def bilinear_gather(double[:, :, ::1] src, double[:, ::1] rows, double[:, ::1] cols,
                    cnp.uint8_t[:, ::1] valid):
    cdef Py_ssize_t c = src.shape[0], h = src.shape[1], w = src.shape[2]
    cdef Py_ssize_t ht = rows.shape[0], wt = rows.shape[1]
    dst_arr = np.zeros((c, ht, wt))
    cdef double[:, :, ::1] dst = dst_arr
    cdef Py_ssize_t ch, i, j, r0, c0
    cdef double fr, fc, acc, w00, w01, w10, w11
    for i in range(ht):
        for j in range(wt):
            if not valid[i, j]:
                continue
            r0 = <Py_ssize_t>floor(rows[i, j])
            c0 = <Py_ssize_t>floor(cols[i, j])
            fr = rows[i, j] - r0
            fc = cols[i, j] - c0
            w00 = (1.0 - fr) * (1.0 - fc)
            w01 = (1.0 - fr) * fc
            w10 = fr * (1.0 - fc)
            w11 = fr * fc
            for ch in range(c):
                acc = 0.0
                if 0 <= r0 < h:
                    if 0 <= c0 < w:
                        acc += w00 * src[ch, r0, c0]
                    if 0 <= c0 + 1 < w:
                        acc += w01 * src[ch, r0, c0 + 1]
                if 0 <= r0 + 1 < h:
                    if 0 <= c0 < w:
                        acc += w10 * src[ch, r0 + 1, c0]
                    if 0 <= c0 + 1 < w:
                        acc += w11 * src[ch, r0 + 1, c0 + 1]
                dst[ch, i, j] = acc
    return dst_arr


def bilinear_scatter(double[:, :, ::1] gdst, double[:, ::1] rows, double[:, ::1] cols,
                     cnp.uint8_t[:, ::1] valid, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t c = gdst.shape[0]
    cdef Py_ssize_t ht = rows.shape[0], wt = rows.shape[1]
    gsrc_arr = np.zeros((c, h, w))
    cdef double[:, :, ::1] gsrc = gsrc_arr
    cdef Py_ssize_t ch, i, j, r0, c0
    cdef double fr, fc, g, w00, w01, w10, w11
    for i in range(ht):
        for j in range(wt):
            if not valid[i, j]:
                continue
            r0 = <Py_ssize_t>floor(rows[i, j])
            c0 = <Py_ssize_t>floor(cols[i, j])
            fr = rows[i, j] - r0
            fc = cols[i, j] - c0
            w00 = (1.0 - fr) * (1.0 - fc)
            w01 = (1.0 - fr) * fc
            w10 = fr * (1.0 - fc)
            w11 = fr * fc
            for ch in range(c):
                g = gdst[ch, i, j]
                if g == 0.0:
                    continue
                if 0 <= r0 < h:
                    if 0 <= c0 < w:
                        gsrc[ch, r0, c0] += g * w00
                    if 0 <= c0 + 1 < w:
                        gsrc[ch, r0, c0 + 1] += g * w01
                if 0 <= r0 + 1 < h:
                    if 0 <= c0 < w:
                        gsrc[ch, r0 + 1, c0] += g * w10
                    if 0 <= c0 + 1 < w:
                        gsrc[ch, r0 + 1, c0 + 1] += g * w11
    return gsrc_arr
