"""Backend selection for the conv patch kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation takes over. Setting ``UNIPAINT_PURE_PYTHON=1`` forces the
fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("UNIPAINT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _contig(x):
    return np.ascontiguousarray(x)


def im2col_2d(x, kh, kw, stride=1, pad=0):
    return _impl.im2col_2d(_contig(x), kh, kw, stride, pad)


def col2im_2d(cols, x_shape, kh, kw, stride=1, pad=0):
    return _impl.col2im_2d(_contig(cols), tuple(x_shape), kh, kw, stride, pad)


def im2col_3d(x, kd, kh, kw, stride=1, pad=0):
    return _impl.im2col_3d(_contig(x), kd, kh, kw, stride, pad)


def col2im_3d(cols, x_shape, kd, kh, kw, stride=1, pad=0):
    return _impl.col2im_3d(_contig(cols), tuple(x_shape), kd, kh, kw, stride, pad)
