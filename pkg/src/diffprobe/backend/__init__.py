"""Hot numeric kernels with two interchangeable implementations.

The numba path JIT-compiles the gather/scatter loops that sit between the
BLAS calls (im2col/col2im for convolutions, bilinear resampling). The pure
numpy path implements the same contracts with vectorized code and is used
when numba is unavailable or when ``DIFFPROBE_NO_NUMBA=1`` is set.

``im2col`` returns a thread-local scratch buffer to avoid re-faulting large
freshly allocated pages on every call. The buffer is only valid until the
next backend call on the same thread; callers must consume it immediately
(feed it to a GEMM) and never store a reference.
"""

from __future__ import annotations

import os
import threading

import numpy as np

_ENV_FLAG = "DIFFPROBE_NO_NUMBA"

_local = threading.local()


def _resolve_default() -> str:
    if os.environ.get(_ENV_FLAG, "").strip() in ("1", "true", "yes"):
        return "numpy"
    try:
        from . import _numba_kernels  # noqa: F401
    except Exception:
        return "numpy"
    return "numba"


_ACTIVE = _resolve_default()


def active_backend() -> str:
    """Name of the kernel implementation currently in use."""
    return _ACTIVE


def set_backend(name: str) -> None:
    """Switch kernel implementation ("numba" or "numpy") at runtime.

    Intended for benchmarks and tests; normal use relies on the env flag.
    """
    global _ACTIVE
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba":
        from . import _numba_kernels  # noqa: F401  (raises if unavailable)
    _ACTIVE = name


def _kernels():
    if _ACTIVE == "numba":
        from . import _numba_kernels as k
    else:
        from . import _numpy_kernels as k
    return k


def scratch(shape: tuple, dtype, tag: str) -> np.ndarray:
    """Thread-local reusable buffer for a given (tag, shape, dtype)."""
    pool = getattr(_local, "pool", None)
    if pool is None:
        pool = _local.pool = {}
    key = (tag, shape, np.dtype(dtype).str)
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.empty(shape, dtype=dtype)
    return buf


def clear_scratch() -> None:
    _local.pool = {}


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Unfold padded input (B,C,Hp,Wp) into (B, C*kh*kw, oh*ow) scratch."""
    b, c = xp.shape[0], xp.shape[1]
    out = scratch((b, c * kh * kw, oh * ow), xp.dtype, "im2col")
    _kernels().im2col(xp, kh, kw, stride, oh, ow, out)
    return out


def gcols_buffer(b: int, ckk: int, p: int, dtype) -> np.ndarray:
    return scratch((b, ckk, p), dtype, "gcols")


def col2im(gcols: np.ndarray, c: int, hp: int, wp: int, kh: int, kw: int,
           stride: int, oh: int, ow: int) -> np.ndarray:
    """Fold column gradients back onto the padded input layout (scatter-add)."""
    b = gcols.shape[0]
    gxp = np.zeros((b, c, hp, wp), dtype=gcols.dtype)
    _kernels().col2im(gcols, kh, kw, stride, oh, ow, gxp)
    return gxp


def bilinear_resize(x: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Resize (B,C,H,W) to (B,C,oh,ow); half-pixel centers, clamped edges."""
    b, c, h, w = x.shape
    y = np.empty((b, c, oh, ow), dtype=x.dtype)
    _kernels().bilinear_resize(x, y)
    return y


def bilinear_resize_grad(gy: np.ndarray, h: int, w: int) -> np.ndarray:
    b, c = gy.shape[0], gy.shape[1]
    gx = np.zeros((b, c, h, w), dtype=gy.dtype)
    _kernels().bilinear_resize_grad(gy, gx)
    return gx
