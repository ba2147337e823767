# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch gather/scatter kernels.

Same contract and accumulation order as ``_pykernels``.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col_2d(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, oh, ow, kh, kw, c), dtype=dtype)
    cdef floating[:, :, :, :, :, ::1] cols = out
    cdef Py_ssize_t b, oy, ox, i, j, ch, iy, ix
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                for i in range(kh):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h:
                        continue
                    for j in range(kw):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= w:
                            continue
                        for ch in range(c):
                            cols[b, oy, ox, i, j, ch] = x[b, iy, ix, ch]
    return out


def col2im_2d(floating[:, :, :, :, :, ::1] cols, tuple x_shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3]
    cdef Py_ssize_t oh = cols.shape[1], ow = cols.shape[2]
    dtype = np.float32 if floating is float else np.float64
    res = np.zeros((n, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] out = res
    cdef Py_ssize_t b, oy, ox, i, j, ch, iy, ix
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for oy in range(oh):
                    iy = oy * stride + i - pad
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(ow):
                        ix = ox * stride + j - pad
                        if ix < 0 or ix >= w:
                            continue
                        for ch in range(c):
                            out[b, iy, ix, ch] += cols[b, oy, ox, i, j, ch]
    return res


def im2col_3d(floating[:, :, :, :, ::1] x, int kd, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], h = x.shape[2], w = x.shape[3], c = x.shape[4]
    cdef Py_ssize_t od = (d + 2 * pad - kd) // stride + 1
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n * od * oh * ow, kd * kh * kw * c), dtype=dtype)
    # flattened [rows, kd*kh*kw*c]; buffers are capped at 7 dims
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t b, oz, oy, ox, a, i, j, ch, iz, iy, ix, row, col
    for b in range(n):
        for oz in range(od):
            for oy in range(oh):
                for ox in range(ow):
                    row = ((b * od + oz) * oh + oy) * ow + ox
                    for a in range(kd):
                        iz = oz * stride + a - pad
                        if iz < 0 or iz >= d:
                            continue
                        for i in range(kh):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(kw):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                col = ((a * kh + i) * kw + j) * c
                                for ch in range(c):
                                    cols[row, col + ch] = x[b, iz, iy, ix, ch]
    return out.reshape(n, od, oh, ow, kd, kh, kw, c)


def col2im_3d(cols_in, tuple x_shape, int kd, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t od = cols_in.shape[1], oh = cols_in.shape[2], ow = cols_in.shape[3]
    flat = cols_in.reshape(-1, kd * kh * kw * x_shape[4])
    return _col2im_3d_flat(np.ascontiguousarray(flat), x_shape, od, oh, ow, kd, kh, kw, stride, pad)


def _col2im_3d_flat(floating[:, ::1] cols, tuple x_shape, Py_ssize_t od, Py_ssize_t oh,
                    Py_ssize_t ow, int kd, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x_shape[0], d = x_shape[1], h = x_shape[2], w = x_shape[3], c = x_shape[4]
    dtype = np.float32 if floating is float else np.float64
    res = np.zeros((n, d, h, w, c), dtype=dtype)
    cdef floating[:, :, :, :, ::1] out = res
    cdef Py_ssize_t b, oz, oy, ox, a, i, j, ch, iz, iy, ix, row, col
    for a in range(kd):
        for i in range(kh):
            for j in range(kw):
                col = ((a * kh + i) * kw + j) * c
                for b in range(n):
                    for oz in range(od):
                        iz = oz * stride + a - pad
                        if iz < 0 or iz >= d:
                            continue
                        for oy in range(oh):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(ow):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                row = ((b * od + oz) * oh + oy) * ow + ox
                                for ch in range(c):
                                    out[b, iz, iy, ix, ch] += cols[row, col + ch]
    return res
