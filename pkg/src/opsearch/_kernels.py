"""Sliding-window gather/scatter kernels used by convolution and pooling.

Two backends share one interface. The numba backend compiles explicit loops;
the numpy backend uses strided views. Set ``OPSEARCH_DISABLE_NUMBA=1`` before
import to force the numpy path (numba is also skipped when it is missing).
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DISABLED = os.environ.get("OPSEARCH_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by OPSEARCH_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


# ---------------------------------------------------------------- numpy path


def im2col_numpy(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = output_size(h, kh, stride, pad)
    ow = output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (n, c, oh, ow, kh, kw) -> (n, oh, ow, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im_numpy(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = output_size(h, kh, stride, pad)
    ow = output_size(w, kw, stride, pad)
    blocks = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for p in range(kh):
        for q in range(kw):
            out[:, :, p : p + stride * oh : stride, q : q + stride * ow : stride] += blocks[:, :, p, q]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_loops(x, kh, kw, stride, pad, oh, ow):
        n, c, h, w = x.shape
        cols = np.zeros((n * oh * ow, c * kh * kw))
        for b in range(n):
            for i in range(oh):
                for j in range(ow):
                    row = (b * oh + i) * ow + j
                    for ch in range(c):
                        for p in range(kh):
                            y = i * stride - pad + p
                            if y < 0 or y >= h:
                                continue
                            base = (ch * kh + p) * kw
                            for q in range(kw):
                                xx = j * stride - pad + q
                                if xx >= 0 and xx < w:
                                    cols[row, base + q] = x[b, ch, y, xx]
        return cols

    @njit(cache=True)
    def _col2im_loops(cols, n, c, h, w, kh, kw, stride, pad, oh, ow):
        out = np.zeros((n, c, h, w))
        for b in range(n):
            for i in range(oh):
                for j in range(ow):
                    row = (b * oh + i) * ow + j
                    for ch in range(c):
                        for p in range(kh):
                            y = i * stride - pad + p
                            if y < 0 or y >= h:
                                continue
                            base = (ch * kh + p) * kw
                            for q in range(kw):
                                xx = j * stride - pad + q
                                if xx >= 0 and xx < w:
                                    out[b, ch, y, xx] += cols[row, base + q]
        return out

    def im2col_numba(x, kh, kw, stride, pad):
        n, c, h, w = x.shape
        oh = output_size(h, kh, stride, pad)
        ow = output_size(w, kw, stride, pad)
        return _im2col_loops(np.ascontiguousarray(x, dtype=np.float64), kh, kw, stride, pad, oh, ow)

    def col2im_numba(cols, x_shape, kh, kw, stride, pad):
        n, c, h, w = x_shape
        oh = output_size(h, kh, stride, pad)
        ow = output_size(w, kw, stride, pad)
        return _col2im_loops(
            np.ascontiguousarray(cols, dtype=np.float64), n, c, h, w, kh, kw, stride, pad, oh, ow
        )

    im2col = im2col_numba
    col2im = col2im_numba
    BACKEND = "numba"
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    BACKEND = "numpy"
