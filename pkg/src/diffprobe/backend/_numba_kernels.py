"""JIT-compiled kernel implementations.

Loop orders keep both the source reads and destination writes contiguous
along the fastest-varying axis, which matters more than vectorization here:
these kernels are memory bound.

im2col stays on the numpy implementation even on this path: the strided
sliding-window copy is already memory-bandwidth-bound and the scalar JIT
loop measures slower (see ``python -m diffprobe.bench``).
"""

import numpy as np
from numba import njit

from ._numpy_kernels import im2col  # noqa: F401  (deliberate delegation)


@njit(cache=True)
def col2im(gcols, kh, kw, stride, oh, ow, gxp):
    b, c = gxp.shape[0], gxp.shape[1]
    for n in range(b):
        r = 0
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    p = 0
                    for y in range(oh):
                        dst = gxp[n, ch, y * stride + i]
                        for x in range(ow):
                            dst[x * stride + j] += gcols[n, r, p]
                            p += 1
                    r += 1


@njit(cache=True)
def bilinear_resize(x, y):
    b, c, h, w = x.shape
    oh, ow = y.shape[2], y.shape[3]
    sh = h / oh
    sw = w / ow
    for n in range(b):
        for ch in range(c):
            for oy in range(oh):
                fy = (oy + 0.5) * sh - 0.5
                if fy < 0.0:
                    fy = 0.0
                y0 = int(fy)
                if y0 > h - 2:
                    y0 = h - 2
                if y0 < 0:
                    y0 = 0
                wy = fy - y0
                if wy > 1.0:
                    wy = 1.0
                row0 = x[n, ch, y0]
                row1 = x[n, ch, y0 + 1] if h > 1 else x[n, ch, y0]
                if h == 1:
                    wy = 0.0
                for ox in range(ow):
                    fx = (ox + 0.5) * sw - 0.5
                    if fx < 0.0:
                        fx = 0.0
                    x0 = int(fx)
                    if x0 > w - 2:
                        x0 = w - 2
                    if x0 < 0:
                        x0 = 0
                    wx = fx - x0
                    if wx > 1.0:
                        wx = 1.0
                    if w == 1:
                        wx = 0.0
                    x1 = x0 + 1 if w > 1 else x0
                    top = row0[x0] * (1.0 - wx) + row0[x1] * wx
                    bot = row1[x0] * (1.0 - wx) + row1[x1] * wx
                    y[n, ch, oy, ox] = top * (1.0 - wy) + bot * wy


@njit(cache=True)
def bilinear_resize_grad(gy, gx):
    b, c, h, w = gx.shape
    oh, ow = gy.shape[2], gy.shape[3]
    sh = h / oh
    sw = w / ow
    for n in range(b):
        for ch in range(c):
            for oy in range(oh):
                fy = (oy + 0.5) * sh - 0.5
                if fy < 0.0:
                    fy = 0.0
                y0 = int(fy)
                if y0 > h - 2:
                    y0 = h - 2
                if y0 < 0:
                    y0 = 0
                wy = fy - y0
                if wy > 1.0:
                    wy = 1.0
                if h == 1:
                    wy = 0.0
                y1 = y0 + 1 if h > 1 else y0
                for ox in range(ow):
                    fx = (ox + 0.5) * sw - 0.5
                    if fx < 0.0:
                        fx = 0.0
                    x0 = int(fx)
                    if x0 > w - 2:
                        x0 = w - 2
                    if x0 < 0:
                        x0 = 0
                    wx = fx - x0
                    if wx > 1.0:
                        wx = 1.0
                    if w == 1:
                        wx = 0.0
                    x1 = x0 + 1 if w > 1 else x0
                    g = gy[n, ch, oy, ox]
                    gx[n, ch, y0, x0] += g * (1.0 - wy) * (1.0 - wx)
                    gx[n, ch, y0, x1] += g * (1.0 - wy) * wx
                    gx[n, ch, y1, x0] += g * wy * (1.0 - wx)
                    gx[n, ch, y1, x1] += g * wy * wx
