"""Fusion strategies collapsing per-scale feature groups into one map per scale.

Three learnable strategies plus a parameter-free concatenation baseline:

* global: one learnable scalar per (feature, timestep) pair, shared across
  scales, applied to channel-projected features before summation.
* localized: a small gate network produces per-pixel logits over the
  (feature, timestep) axis from the mean projected feature; softmax makes
  the per-pixel combination convex.
* moe: per timestep, raw features concatenate along channels and route
  through a bank of per-pixel expert MLPs with top-k gating; expert banks
  and routers are shared across timesteps within a scale.

Group order (timestep-major, then block, then kind) defines every index
here; see ``features.group_by_scale``.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .features import FeatureStack, StackKey, group_by_scale

DEFAULT_D_OUT = (64, 96, 128, 160)

STRATEGIES = ("global", "localized", "moe", "concat")


class FusionError(ValueError):
    pass


class FusedPyramid:
    """One fused map per scale, native resolutions preserved."""

    def __init__(self, maps: dict[int, Tensor], check_finite: bool = True):
        if not maps:
            raise FusionError("fused pyramid is empty")
        self.maps = dict(sorted(maps.items()))
        if check_finite:
            for s, t in self.maps.items():
                if not np.isfinite(t.data).all():
                    raise FusionError(f"non-finite fused map at scale {s}")

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(self.maps)

    def __getitem__(self, scale: int) -> Tensor:
        return self.maps[scale]

    def __len__(self) -> int:
        return len(self.maps)

    def channels(self) -> dict[int, int]:
        return {s: t.shape[1] for s, t in self.maps.items()}


def _as_const(arr) -> Tensor:
    return arr if isinstance(arr, Tensor) else Tensor(np.asarray(arr))


class ChannelProjection(nn.Module):
    """Per-pixel linear channel map (1x1 convolution semantics)."""

    def __init__(self, d_in: int, d_out: int, rng):
        super().__init__()
        self.linear = nn.Linear(d_in, d_out, rng)

    def __call__(self, x):
        b, c, h, w = x.shape
        tokens = ag.transpose(ag.reshape(x, (b, c, h * w)), (0, 2, 1))
        out = self.linear(tokens)
        return ag.reshape(ag.transpose(out, (0, 2, 1)), (b, -1, h, w))


class ProjectionSet(nn.Module):
    """One ChannelProjection per feature key, aligned to d_out per scale."""

    def __init__(self, layout: dict[int, list[tuple[StackKey, int]]],
                 d_out: dict[int, int], rng):
        super().__init__()
        self.d_out = dict(d_out)
        self._index: dict[tuple[int, int, str, int], ChannelProjection] = {}
        for scale, entries in layout.items():
            for key, d_in in entries:
                proj = ChannelProjection(d_in, self.d_out[scale], rng)
                name = f"proj_{key.encode()}"
                setattr(self, name, proj)
                self._index[self._k(key)] = proj

    @staticmethod
    def _k(key: StackKey):
        return (key.timestep, key.scale, key.kind.value, key.block)

    def project(self, key: StackKey, x) -> Tensor:
        proj = self._index.get(self._k(key))
        if proj is None:
            raise FusionError(f"missing projection for feature {key.encode()}")
        return proj(_as_const(x))


def _group_layout(stack: FeatureStack) -> dict[int, list[tuple[StackKey, int]]]:
    groups = group_by_scale(stack)
    return {s: [(key, arr.shape[1]) for key, arr in entries] for s, entries in groups.items()}


def _weight_index(keys: list[StackKey]) -> tuple[list[int], int, int]:
    """Map group positions to (row=feature, col=timestep) of the weight matrix."""
    timesteps = sorted({k.timestep for k in keys})
    per_t = len(keys) // len(timesteps)
    if per_t * len(timesteps) != len(keys):
        raise FusionError("feature group is ragged across timesteps")
    return timesteps, per_t, len(timesteps)


def _check_group(expected: list[StackKey], group: list) -> None:
    got = [key for key, _ in group]
    if got != expected:
        raise FusionError(
            f"feature group does not cover the plan: expected {[k.encode() for k in expected]}, "
            f"got {[k.encode() for k in got]}")


class GlobalWeightFusion(nn.Module):
    """Scalar weight per (feature, timestep) pair, shared across scales."""

    def __init__(self, stack: FeatureStack, d_out=DEFAULT_D_OUT, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        layout = _group_layout(stack)
        self.keys_per_scale = {s: [k for k, _ in entries] for s, entries in layout.items()}
        counts = set()
        for s, keys in self.keys_per_scale.items():
            _, per_t, n_t = _weight_index(keys)
            counts.add((per_t, n_t))
        if len(counts) != 1:
            raise FusionError(f"scales disagree on (features, timesteps) counts: {counts}")
        self.num_features, self.num_timesteps = counts.pop()
        d_out_map = {s: d_out[s - 1] for s in layout}
        self.projections = ProjectionSet(layout, d_out_map, rng)
        init = 1.0 / (self.num_features * self.num_timesteps)
        self.weights = nn.Parameter(
            np.full((self.num_features, self.num_timesteps), init, dtype=np.float32))

    def fuse_scale(self, scale: int, group: list) -> Tensor:
        expected = self.keys_per_scale.get(scale)
        if expected is None:
            raise FusionError(f"fusion was not built for scale {scale}")
        _check_group(expected, group)
        if self.weights.shape != (self.num_features, self.num_timesteps):
            raise FusionError(
                f"weight matrix shape {self.weights.shape} does not match plan "
                f"({self.num_features} features x {self.num_timesteps} timesteps)")
        out = None
        for i, (key, arr) in enumerate(group):
            w = self.weights[i % self.num_features, i // self.num_features]
            term = self.projections.project(key, arr) * ag.reshape(w, (1, 1, 1, 1))
            out = term if out is None else out + term
        return out

    def forward(self, groups: dict[int, list]) -> FusedPyramid:
        return FusedPyramid({s: self.fuse_scale(s, g) for s, g in groups.items()})

    __call__ = forward

    def export_weights(self) -> np.ndarray:
        """(features x timesteps) matrix for plain-text export."""
        return self.weights.data.copy()


class GateNet(nn.Module):
    """Small conv stack emitting per-pixel logits over the feature axis."""

    def __init__(self, d_in: int, n_out: int, rng, hidden: int = 32,
                 depth: int = 2, kernel: int = 3):
        super().__init__()
        self.convs = []
        c = d_in
        for i in range(depth - 1):
            conv = nn.Conv2d(c, hidden, kernel, rng)
            setattr(self, f"conv{i}", conv)
            self.convs.append(conv)
            c = hidden
        self.head = nn.Conv2d(c, n_out, kernel, rng)
        self.n_out = n_out

    def __call__(self, x):
        for conv in self.convs:
            x = ag.silu(conv(x))
        return self.head(x)


class LocalizedWeightFusion(nn.Module):
    """Per-pixel convex combination driven by a gating network."""

    def __init__(self, stack: FeatureStack, d_out=DEFAULT_D_OUT, seed: int = 0,
                 gate_hidden: int = 32, gate_depth: int = 2, gate_kernel: int = 3):
        super().__init__()
        rng = np.random.default_rng(seed)
        layout = _group_layout(stack)
        self.keys_per_scale = {s: [k for k, _ in entries] for s, entries in layout.items()}
        d_out_map = {s: d_out[s - 1] for s in layout}
        self.projections = ProjectionSet(layout, d_out_map, rng)
        self.gates = {}
        for s, keys in self.keys_per_scale.items():
            gate = GateNet(d_out_map[s], len(keys), rng, hidden=gate_hidden,
                           depth=gate_depth, kernel=gate_kernel)
            setattr(self, f"gate_s{s}", gate)
            self.gates[s] = gate
        self.last_weight_maps: dict[int, np.ndarray] = {}

    def fuse_scale(self, scale: int, group: list) -> tuple[Tensor, Tensor]:
        expected = self.keys_per_scale.get(scale)
        if expected is None:
            raise FusionError(f"fusion was not built for scale {scale}")
        _check_group(expected, group)
        projected = [self.projections.project(key, arr) for key, arr in group]
        reference = projected[0]
        for p in projected[1:]:
            reference = reference + p
        reference = reference * (1.0 / len(projected))
        logits = self.gates[scale](reference)
        if logits.shape[1] != len(group):
            raise FusionError(
                f"gate emits {logits.shape[1]} channels but the group has {len(group)} features")
        weights = ag.softmax(logits, axis=1)
        out = None
        for i, p in enumerate(projected):
            term = p * weights[:, i:i + 1]
            out = term if out is None else out + term
        return out, weights

    def forward(self, groups: dict[int, list]) -> FusedPyramid:
        maps = {}
        self.last_weight_maps = {}
        for s, g in groups.items():
            fused, weights = self.fuse_scale(s, g)
            maps[s] = fused
            self.last_weight_maps[s] = weights.data
        return FusedPyramid(maps)

    __call__ = forward


class MoEConfig:
    def __init__(self, num_experts: int = 8, top_k: int = 2,
                 expert_hidden: int | None = None, gate_pooling: str = "global-average",
                 load_balance_coef: float = 0.0):
        if num_experts < 1:
            raise FusionError("num_experts must be >= 1")
        if not 1 <= top_k <= num_experts:
            raise FusionError(f"top_k {top_k} outside [1, num_experts={num_experts}]")
        if gate_pooling not in ("global-average", "per-pixel"):
            raise FusionError(f"unknown gate pooling {gate_pooling!r}")
        self.num_experts = num_experts
        self.top_k = top_k
        self.expert_hidden = expert_hidden
        self.gate_pooling = gate_pooling
        self.load_balance_coef = load_balance_coef

    def to_dict(self) -> dict:
        return {"num_experts": self.num_experts, "top_k": self.top_k,
                "expert_hidden": self.expert_hidden, "gate_pooling": self.gate_pooling,
                "load_balance_coef": self.load_balance_coef}


class Expert(nn.Module):
    """Two-layer per-pixel MLP over token sequences (B, HW, C)."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden, rng)
        self.fc2 = nn.Linear(hidden, d_out, rng)

    def __call__(self, tokens):
        return self.fc2(ag.silu(self.fc1(tokens)))


class ExpertBank(nn.Module):
    """E experts plus a router for one scale, shared across timesteps."""

    def __init__(self, d_in: int, d_out: int, config: MoEConfig, rng):
        super().__init__()
        hidden = config.expert_hidden or 2 * d_out
        self.config = config
        self.d_in, self.d_out = d_in, d_out
        self.experts = []
        for e in range(config.num_experts):
            expert = Expert(d_in, hidden, d_out, rng)
            setattr(self, f"expert{e}", expert)
            self.experts.append(expert)
        self.router = nn.Linear(d_in, config.num_experts, rng)
        self.router.weight.data = self.router.weight.data * 0.01

    def gate_values(self, x_ts: Tensor) -> Tensor:
        """Pre-top-k gate probabilities; (B, E) or (B, E, H, W) per pooling."""
        if self.config.gate_pooling == "global-average":
            pooled = ag.tensor_mean(x_ts, axis=(2, 3))
            return ag.softmax(self.router(pooled), axis=-1)
        b, c, h, w = x_ts.shape
        tokens = ag.transpose(ag.reshape(x_ts, (b, c, h * w)), (0, 2, 1))
        logits = self.router(tokens)  # (B, HW, E)
        gates = ag.softmax(logits, axis=-1)
        return ag.reshape(ag.transpose(gates, (0, 2, 1)), (b, self.config.num_experts, h, w))


def _topk_mask(gates: np.ndarray, k: int, axis: int) -> np.ndarray:
    if k >= gates.shape[axis]:
        return np.ones_like(gates)
    order = np.argpartition(-gates, k - 1, axis=axis)
    keep = np.take(order, np.arange(k), axis=axis)
    mask = np.zeros_like(gates)
    np.put_along_axis(mask, keep, 1.0, axis=axis)
    return mask


class MoEFusion(nn.Module):
    """Joint timestep-and-feature fusion through sparse expert banks."""

    def __init__(self, stack: FeatureStack, d_out=DEFAULT_D_OUT, seed: int = 0,
                 config: MoEConfig | None = None):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config or MoEConfig()
        layout = _group_layout(stack)
        self.keys_per_scale = {s: [k for k, _ in entries] for s, entries in layout.items()}
        self.banks: dict[int, ExpertBank] = {}
        self.concat_dims: dict[int, int] = {}
        for s, entries in layout.items():
            keys = [k for k, _ in entries]
            timesteps, per_t, _ = _weight_index(keys)
            c_s = sum(d for _, d in entries[:per_t])
            for t_idx in range(1, len(timesteps)):
                span = entries[t_idx * per_t:(t_idx + 1) * per_t]
                if sum(d for _, d in span) != c_s:
                    raise FusionError(f"scale {s}: concat channels differ across timesteps")
            self.concat_dims[s] = c_s
            bank = ExpertBank(c_s, d_out[s - 1], self.config, rng)
            setattr(self, f"bank_s{s}", bank)
            self.banks[s] = bank
        self.last_aux_loss: Tensor | None = None
        self._aux_terms: list[Tensor] = []

    def _route_pooled(self, bank: ExpertBank, x_ts: Tensor) -> Tensor:
        cfg = self.config
        b, c, h, w = x_ts.shape
        gates = bank.gate_values(x_ts)  # (B, E)
        mask = _topk_mask(gates.data, cfg.top_k, axis=1)
        kept = gates * Tensor(mask)
        renorm = kept / ag.tensor_sum(kept, axis=1, keepdims=True)
        if cfg.load_balance_coef:
            frac = Tensor(mask.mean(axis=0))
            prob = ag.tensor_mean(gates, axis=0)
            self._aux_terms.append(ag.tensor_sum(prob * frac) * float(cfg.num_experts))
        tokens = ag.transpose(ag.reshape(x_ts, (b, c, h * w)), (0, 2, 1))
        out = None
        for e, expert in enumerate(bank.experts):
            rows = np.nonzero(mask[:, e])[0]
            if rows.size == 0:
                continue
            ye = expert(ag.take_rows(tokens, rows))
            gate_e = ag.reshape(ag.take_rows(renorm, rows)[:, e], (-1, 1, 1))
            contrib = ag.scatter_rows(ye * gate_e, rows, b)
            out = contrib if out is None else out + contrib
        out = ag.reshape(ag.transpose(out, (0, 2, 1)), (b, bank.d_out, h, w))
        return out

    def _route_per_pixel(self, bank: ExpertBank, x_ts: Tensor) -> Tensor:
        cfg = self.config
        b, c, h, w = x_ts.shape
        gates = bank.gate_values(x_ts)  # (B, E, H, W)
        mask = _topk_mask(gates.data, cfg.top_k, axis=1)
        kept = gates * Tensor(mask)
        renorm = kept / ag.tensor_sum(kept, axis=1, keepdims=True)
        tokens = ag.transpose(ag.reshape(x_ts, (b, c, h * w)), (0, 2, 1))
        out = None
        for e, expert in enumerate(bank.experts):
            ye = expert(tokens)
            ye = ag.reshape(ag.transpose(ye, (0, 2, 1)), (b, bank.d_out, h, w))
            contrib = ye * renorm[:, e:e + 1]
            out = contrib if out is None else out + contrib
        return out

    def expert_outputs(self, scale: int, x_ts: Tensor) -> list[Tensor]:
        """Dense per-expert outputs (no top-k) for inspection tooling."""
        bank = self.banks[scale]
        b, c, h, w = x_ts.shape
        tokens = ag.transpose(ag.reshape(x_ts, (b, c, h * w)), (0, 2, 1))
        outs = []
        for expert in bank.experts:
            ye = expert(tokens)
            outs.append(ag.reshape(ag.transpose(ye, (0, 2, 1)), (b, bank.d_out, h, w)))
        return outs

    def concat_timestep(self, scale: int, group: list, t_idx: int) -> Tensor:
        """Channel concatenation of one timestep's features, in group order."""
        keys = self.keys_per_scale[scale]
        _, per_t, _ = _weight_index(keys)
        span = group[t_idx * per_t:(t_idx + 1) * per_t]
        parts = [_as_const(arr) for _, arr in span]
        x_ts = parts[0] if len(parts) == 1 else ag.concatenate(parts, axis=1)
        if x_ts.shape[1] != self.concat_dims[scale]:
            raise FusionError(
                f"scale {scale}: concatenated channels {x_ts.shape[1]} do not match the "
                f"expert bank contract {self.concat_dims[scale]}")
        return x_ts

    def fuse_scale(self, scale: int, group: list) -> Tensor:
        expected = self.keys_per_scale.get(scale)
        if expected is None:
            raise FusionError(f"fusion was not built for scale {scale}")
        _check_group(expected, group)
        bank = self.banks[scale]
        timesteps, per_t, n_t = _weight_index(expected)
        route = (self._route_pooled if self.config.gate_pooling == "global-average"
                 else self._route_per_pixel)
        out = None
        for t_idx in range(n_t):
            y_ts = route(bank, self.concat_timestep(scale, group, t_idx))
            out = y_ts if out is None else out + y_ts
        return out

    def forward(self, groups: dict[int, list]) -> FusedPyramid:
        self._aux_terms = []
        pyramid = FusedPyramid({s: self.fuse_scale(s, g) for s, g in groups.items()})
        if self._aux_terms:
            total = self._aux_terms[0]
            for term in self._aux_terms[1:]:
                total = total + term
            self.last_aux_loss = total * (1.0 / len(self._aux_terms))
        else:
            self.last_aux_loss = None
        return pyramid

    __call__ = forward


def simple_concat(stack: FeatureStack) -> FusedPyramid:
    """Parameter-free baseline: per-scale channel concatenation in group order."""
    groups = group_by_scale(stack)
    maps = {}
    for s, entries in groups.items():
        parts = [_as_const(arr) for _, arr in entries]
        maps[s] = parts[0] if len(parts) == 1 else ag.concatenate(parts, axis=1)
    return FusedPyramid(maps)


def build_fusion(strategy: str, stack: FeatureStack, d_out=DEFAULT_D_OUT, seed: int = 0,
                 moe_config: MoEConfig | None = None, **kwargs):
    """Construct the learnable state for a strategy from a template stack."""
    if strategy == "global":
        return GlobalWeightFusion(stack, d_out=d_out, seed=seed, **kwargs)
    if strategy == "localized":
        return LocalizedWeightFusion(stack, d_out=d_out, seed=seed, **kwargs)
    if strategy == "moe":
        return MoEFusion(stack, d_out=d_out, seed=seed, config=moe_config, **kwargs)
    if strategy == "concat":
        return None
    raise FusionError(f"unknown fusion strategy {strategy!r}")


def fuse_pyramid(stack: FeatureStack, strategy: str, params=None) -> FusedPyramid:
    """Apply one strategy to every scale group of a stack."""
    if strategy not in STRATEGIES:
        raise FusionError(f"unknown fusion strategy {strategy!r}")
    if strategy == "concat":
        if params is not None:
            raise FusionError("concat takes no learnable parameters")
        return simple_concat(stack)
    expected = {"global": GlobalWeightFusion, "localized": LocalizedWeightFusion,
                "moe": MoEFusion}[strategy]
    if not isinstance(params, expected):
        raise FusionError(
            f"strategy {strategy!r} needs {expected.__name__} parameters, "
            f"got {type(params).__name__}")
    return params(group_by_scale(stack))
