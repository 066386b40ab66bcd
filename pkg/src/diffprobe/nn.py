"""Parameterized building blocks on top of the autograd engine.

Modules own Parameters, register submodules through attribute assignment,
and expose torch-flavored ``state_dict`` / ``parameters`` accessors. All
random initialization draws from an explicit numpy Generator so models are
pure functions of their seeds.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter(Tensor):
    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.asarray(data), requires_grad=requires_grad)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad = True
        return self

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing={sorted(missing)}, unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
        return self

    def checksum(self) -> str:
        """SHA-256 over all parameter bytes, in stable name order."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            setattr(self, f"layer{i}", layer)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class SiLU(Module):
    def __call__(self, x):
        return ag.silu(x)


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Linear(Module):
    """Affine map on the last axis; weight stored (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=np.float32)
        else:
            w = _he_normal(rng, (d_in, d_out), d_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=np.float32)) if bias else None

    def __call__(self, x):
        out = ag.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True,
                 zero_init: bool = False):
        super().__init__()
        padding = kernel // 2 if padding is None else padding
        self.stride, self.padding = stride, padding
        shape = (c_out, c_in, kernel, kernel)
        fan_in = c_in * kernel * kernel
        w = np.zeros(shape, dtype=np.float32) if zero_init else _he_normal(rng, shape, fan_in)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32)) if bias else None

    def __call__(self, x):
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    """Per-sample normalization over channel groups of a (B,C,H,W) tensor."""

    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        super().__init__()
        while channels % groups:
            groups -= 1
        self.groups, self.eps = groups, eps
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))

    def __call__(self, x):
        b, c, h, w = x.shape
        g = self.groups
        xg = ag.reshape(x, (b, g, c // g * h * w))
        mu = ag.tensor_mean(xg, axis=2, keepdims=True)
        centered = xg - mu
        var = ag.tensor_mean(centered * centered, axis=2, keepdims=True)
        normed = centered * ag.power(var + self.eps, -0.5)
        normed = ag.reshape(normed, (b, c, h, w))
        return normed * ag.reshape(self.weight, (1, c, 1, 1)) + ag.reshape(self.bias, (1, c, 1, 1))


class LayerNorm(Module):
    """Normalization over the last axis of a (..., C) tensor."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32))

    def __call__(self, x):
        mu = ag.tensor_mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = ag.tensor_mean(centered * centered, axis=-1, keepdims=True)
        return centered * ag.power(var + self.eps, -0.5) * self.weight + self.bias


class Attention(Module):
    """Scaled dot-product attention over token sequences (B, N, C).

    With ``context_dim`` set, keys/values come from a context sequence
    (B, M, context_dim) or (M, context_dim); otherwise self-attention.
    Returns the output-projection activations, before any residual add.
    """

    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 1,
                 context_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        kv_dim = context_dim if context_dim is not None else dim
        self.dim, self.heads = dim, heads
        self.to_q = Linear(dim, dim, rng, bias=False)
        self.to_k = Linear(kv_dim, dim, rng, bias=False)
        self.to_v = Linear(kv_dim, dim, rng, bias=False)
        self.proj = Linear(dim, dim, rng)

    def _split(self, t, b, n):
        t = ag.reshape(t, (b, n, self.heads, self.dim // self.heads))
        return ag.transpose(t, (0, 2, 1, 3))

    def __call__(self, x, context=None, return_weights: bool = False):
        b, n, _ = x.shape
        ctx = x if context is None else context
        if ctx.ndim == 2:
            ctx = ag.reshape(ctx, (1,) + ctx.shape)
            ctx = ag.concatenate([ctx] * b, axis=0) if b > 1 else ctx
        m = ctx.shape[1]
        q = self._split(self.to_q(x), b, n)
        k = self._split(self.to_k(ctx), b, m)
        v = self._split(self.to_v(ctx), b, m)
        scale = (self.dim // self.heads) ** -0.5
        scores = ag.matmul(q * scale, ag.transpose(k, (0, 1, 3, 2)))
        weights = ag.softmax(scores, axis=-1)
        attended = ag.matmul(weights, v)
        attended = ag.reshape(ag.transpose(attended, (0, 2, 1, 3)), (b, n, self.dim))
        out = self.proj(attended)
        if return_weights:
            return out, weights
        return out


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 2):
        super().__init__()
        self.fc1 = Linear(dim, dim * expansion, rng)
        self.fc2 = Linear(dim * expansion, dim, rng)

    def __call__(self, x):
        return self.fc2(ag.silu(self.fc1(x)))


def sinusoidal_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Classic sin/cos positional features for integer timesteps (B,) -> (B, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb.astype(dtype)
