"""Pure numpy patch gather/scatter kernels (fallback backend).

Layouts are channels-last: 2D inputs are ``[N, H, W, C]`` and 3D inputs are
``[N, D, H, W, C]``. Column matrices put the kernel offsets before channels,
so a weight tensor ``[kh, kw, Cin, Cout]`` reshapes directly into the matmul
operand.

The scatter kernels accumulate kernel offsets in row-major order; the compiled
backend follows the same order so both produce bit-identical results.
"""

import numpy as np


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col_2d(x, kh, kw, stride, pad):
    n, h, w, c = x.shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = x[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    return cols


def col2im_2d(cols, x_shape, kh, kw, stride, pad):
    n, h, w, c = x_shape
    oh, ow = cols.shape[1], cols.shape[2]
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:pad + h, pad:pad + w, :]
    return np.ascontiguousarray(out)


def im2col_3d(x, kd, kh, kw, stride, pad):
    n, d, h, w, c = x.shape
    od = _out_size(d, kd, stride, pad)
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, od, oh, ow, kd, kh, kw, c), dtype=x.dtype)
    for a in range(kd):
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, :, a, i, j, :] = x[
                    :,
                    a:a + stride * od:stride,
                    i:i + stride * oh:stride,
                    j:j + stride * ow:stride,
                    :,
                ]
    return cols


def col2im_3d(cols, x_shape, kd, kh, kw, stride, pad):
    n, d, h, w, c = x_shape
    od, oh, ow = cols.shape[1], cols.shape[2], cols.shape[3]
    out = np.zeros((n, d + 2 * pad, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for a in range(kd):
        for i in range(kh):
            for j in range(kw):
                out[
                    :,
                    a:a + stride * od:stride,
                    i:i + stride * oh:stride,
                    j:j + stride * ow:stride,
                    :,
                ] += cols[:, :, :, :, a, i, j, :]
    if pad:
        out = out[:, pad:pad + d, pad:pad + h, pad:pad + w, :]
    return np.ascontiguousarray(out)
