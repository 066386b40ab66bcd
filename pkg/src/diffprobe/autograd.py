"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and, while gradient recording is enabled, every
operation appends a vector-Jacobian closure to the graph. ``backward`` runs
one reverse topological sweep and deposits gradients on leaf tensors.

Primitives route their inner loops through :mod:`diffprobe.backend`, so the
same graph runs on the numba or the pure-numpy kernel path.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import backend

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t = Tensor(data, requires_grad=True)
        t._parents = parents
        t._vjp = vjp
        return t
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ------------------------------------------------------------
# Python scalars stay scalars inside the numpy expressions so they never
# promote float32 tensors to float64.

_SCALARS = (int, float)


def add(a, b) -> Tensor:
    if isinstance(b, _SCALARS):
        a = as_tensor(a)
        return _node(a.data + b, (a,), lambda g: (g,))
    if isinstance(a, _SCALARS):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    if isinstance(b, _SCALARS):
        a = as_tensor(a)
        return _node(a.data - b, (a,), lambda g: (g,))
    if isinstance(a, _SCALARS):
        b = as_tensor(b)
        return _node(a - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    if isinstance(b, _SCALARS):
        a = as_tensor(a)
        return _node(a.data * b, (a,), lambda g: (g * b,))
    if isinstance(a, _SCALARS):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    if isinstance(b, _SCALARS):
        return mul(a, 1.0 / b)
    if isinstance(a, _SCALARS):
        b = as_tensor(b)
        out = a / b.data
        return _node(out, (b,), lambda g: (-g * out / b.data,))
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _node(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _node(a.data * s, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))


# -- reductions and shape --------------------------------------------------

def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out.size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _node(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=()) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(range(a.ndim - 1, -1, -1))
    inv = tuple(int(i) for i in np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concatenate(tensors: list, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        ga[key] = g
        return (ga,)

    return _node(a.data[key], (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if need_a else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if need_b else None
        return (ga, gb)

    return _node(np.matmul(a.data, b.data), (a, b), vjp)


# -- indexing along axes ---------------------------------------------------

def gather_last(a, index: np.ndarray) -> Tensor:
    """take_along_axis on the last axis; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(index)

    def vjp(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        flat = ga.reshape(-1, a.shape[-1])
        fi = np.broadcast_to(idx, g.shape).reshape(-1, g.shape[-1])
        rows = np.arange(flat.shape[0])[:, None]
        np.add.at(flat, (rows, fi), g.reshape(-1, g.shape[-1]))
        return (ga,)

    return _node(np.take_along_axis(a.data, idx, axis=-1), (a,), vjp)


def take_rows(a, index: np.ndarray) -> Tensor:
    """Select rows along the leading axis; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(index)

    def vjp(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(a.data[idx], (a,), vjp)


def scatter_rows(values, index: np.ndarray, num_rows: int) -> Tensor:
    """Place rows at positions ``index`` of a zero tensor with ``num_rows`` rows.

    Indices must be unique; the backward pass is a row gather.
    """
    values = as_tensor(values)
    idx = np.asarray(index)
    out = np.zeros((num_rows,) + values.shape[1:], dtype=values.dtype)
    out[idx] = values.data
    return _node(out, (values,), lambda g: (g[idx],))


# -- softmax family ---------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _node(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), vjp)


# -- spatial primitives ------------------------------------------------------

def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B,C,H,W) with (O,C,kh,kw) filters."""
    x, w = as_tensor(x), as_tensor(w)
    bt = as_tensor(b) if b is not None else None
    bsz, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {ci}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    def _cols(data):
        if pointwise:
            return data.reshape(bsz, c, h * wd)
        xp = np.pad(data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
            if padding else data
        return backend.im2col(xp, kh, kw, stride, oh, ow)

    cols = _cols(x.data)
    out = np.matmul(w.data.reshape(o, -1), cols)
    if bt is not None:
        out += bt.data[:, None]
    out = out.reshape(bsz, o, oh, ow)

    need_x = x.requires_grad

    def vjp(g):
        gflat = g.reshape(bsz, o, oh * ow)
        cols_b = _cols(x.data)
        gw = np.matmul(gflat, cols_b.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3)) if bt is not None else None
        gx = None
        if need_x:
            wt = np.ascontiguousarray(w.data.reshape(o, -1).T)
            if pointwise:
                gx = np.matmul(wt, gflat).reshape(x.shape)
            else:
                gcols = backend.gcols_buffer(bsz, c * kh * kw, oh * ow, g.dtype)
                np.matmul(wt, gflat, out=gcols)
                gxp = backend.col2im(gcols, c, h + 2 * padding, wd + 2 * padding,
                                     kh, kw, stride, oh, ow)
                gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return (gx, gw, gb)

    parents = (x, w, bt) if bt is not None else (x, w)
    if bt is None:
        return _node(out, parents, lambda g: vjp(g)[:2])
    return _node(out, parents, vjp)


def bilinear_resize(x, size: tuple) -> Tensor:
    x = as_tensor(x)
    oh, ow = size
    if (oh, ow) == x.shape[2:]:
        return x
    out = backend.bilinear_resize(x.data, oh, ow)
    h, w = x.shape[2], x.shape[3]
    return _node(out, (x,), lambda g: (backend.bilinear_resize_grad(g, h, w),))


def adaptive_avg_pool2d(x, bins: tuple) -> Tensor:
    x = as_tensor(x)
    bsz, c, h, w = x.shape
    bh, bw = bins
    edges_h = [(i * h // bh, -(-(i + 1) * h // bh)) for i in range(bh)]
    edges_w = [(j * w // bw, -(-(j + 1) * w // bw)) for j in range(bw)]
    out = np.empty((bsz, c, bh, bw), dtype=x.dtype)
    for i, (r0, r1) in enumerate(edges_h):
        for j, (c0, c1) in enumerate(edges_w):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i, (r0, r1) in enumerate(edges_h):
            for j, (c0, c1) in enumerate(edges_w):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += g[:, :, i, j, None, None] / area
        return (gx,)

    return _node(out, (x,), vjp)


def avg_pool2x2(x) -> Tensor:
    x = as_tensor(x)
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x2 needs even spatial dims, got {(h, w)}")
    r = reshape(x, (bsz, c, h // 2, 2, w // 2, 2))
    return tensor_mean(r, axis=(3, 5))


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    bsz, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None],
                          (bsz, c, h, 2, w, 2)).reshape(bsz, c, 2 * h, 2 * w)

    def vjp(g):
        return (g.reshape(bsz, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _node(np.ascontiguousarray(out), (x,), vjp)
