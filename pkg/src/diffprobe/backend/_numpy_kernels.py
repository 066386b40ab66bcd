"""Vectorized numpy implementations of the backend kernel contracts."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, oh, ow, out):
    b, c = xp.shape[0], xp.shape[1]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, oh, ow, kh, kw) -> (B, C, kh, kw, oh, ow) flattened into out
    view = out.reshape(b, c, kh, kw, oh, ow)
    np.copyto(view, win.transpose(0, 1, 4, 5, 2, 3))


def col2im(gcols, kh, kw, stride, oh, ow, gxp):
    b, c = gxp.shape[0], gxp.shape[1]
    g = gcols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dst = gxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride]
            dst += g[:, :, i, j]


def _grid(n_in, n_out, dtype):
    f = np.maximum((np.arange(n_out, dtype=dtype) + 0.5) * (n_in / n_out) - 0.5, 0.0)
    i0 = np.minimum(f.astype(np.int64), max(n_in - 2, 0))
    w = np.minimum(f - i0, 1.0)
    if n_in == 1:
        w = np.zeros_like(w)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, w


def bilinear_resize(x, y):
    h, w = x.shape[2], x.shape[3]
    oh, ow = y.shape[2], y.shape[3]
    y0, y1, wy = _grid(h, oh, x.dtype)
    x0, x1, wx = _grid(w, ow, x.dtype)
    top = x[:, :, y0][:, :, :, x0] * (1 - wx) + x[:, :, y0][:, :, :, x1] * wx
    bot = x[:, :, y1][:, :, :, x0] * (1 - wx) + x[:, :, y1][:, :, :, x1] * wx
    np.copyto(y, top * (1 - wy[:, None]) + bot * wy[:, None])


def bilinear_resize_grad(gy, gx):
    h, w = gx.shape[2], gx.shape[3]
    oh, ow = gy.shape[2], gy.shape[3]
    y0, y1, wy = _grid(h, oh, gy.dtype)
    x0, x1, wx = _grid(w, ow, gy.dtype)
    wy = wy[:, None]
    for (yi, fy) in ((y0, 1 - wy), (y1, wy)):
        for (xi, fx) in ((x0, 1 - wx), (x1, wx)):
            contrib = gy * fy * fx
            idx_y = yi[:, None] * w + xi[None, :]
            flat = gx.reshape(gx.shape[0], gx.shape[1], h * w)
            np.add.at(flat, (slice(None), slice(None), idx_y.ravel()),
                      contrib.reshape(gy.shape[0], gy.shape[1], oh * ow))
