"""Feature extraction plumbing: plans, tap bookkeeping, stack containers.

A FeatureStack maps (timestep, scale, block, kind) to captured arrays. The
block index enumerates, per (scale, kind), the tapped blocks in a stable
order: decoder blocks by position, then encoder blocks, then the
bottleneck. Attention payloads arrive as token sequences and are reshaped
onto the scale's spatial grid here.
"""

from __future__ import annotations

import json
import re
import time
import zipfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .autograd import Tensor, no_grad

STACK_FORMAT_VERSION = 1


class ModuleKind(Enum):
    RESNET = "resnet"
    SELF_ATTENTION = "selfattn"
    CROSS_ATTENTION = "crossattn"

    @property
    def rank(self) -> int:
        return _KIND_RANK[self]


_KIND_RANK = {ModuleKind.RESNET: 0, ModuleKind.SELF_ATTENTION: 1, ModuleKind.CROSS_ATTENTION: 2}

DECODER, ENCODER, MID = "decoder", "encoder", "mid"
_HALF_RANK = {DECODER: 0, ENCODER: 1, MID: 2}


@dataclass(frozen=True)
class TapSpec:
    """One tappable block inside a backbone."""
    scale: int
    half: str
    kind: ModuleKind
    block: int = 0

    def __post_init__(self):
        if self.half not in (DECODER, ENCODER, MID):
            raise ValueError(f"unknown half {self.half!r}")


@dataclass(frozen=True)
class StackKey:
    timestep: int
    scale: int
    block: int
    kind: ModuleKind

    @property
    def order(self) -> tuple:
        return (self.timestep, self.block, self.kind.rank)

    def encode(self) -> str:
        return f"t{self.timestep}_s{self.scale}_l{self.block}_{self.kind.value}"


_KEY_RE = re.compile(r"^t(\d+)_s(\d+)_l(\d+)_(resnet|selfattn|crossattn)$")


def decode_key(text: str) -> StackKey:
    m = _KEY_RE.match(text)
    if not m:
        raise ValueError(f"malformed stack key {text!r}")
    return StackKey(int(m.group(1)), int(m.group(2)), int(m.group(3)), ModuleKind(m.group(4)))


@dataclass(frozen=True)
class ExtractionPlan:
    """Which (timesteps x blocks x scales) to capture."""

    timesteps: tuple[int, ...]
    kinds: tuple[tuple[ModuleKind, int | None], ...]
    scales: tuple[int, ...]
    half: str = DECODER
    include_mid: bool = False

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        if not ts:
            raise ValueError("plan needs at least one timestep")
        if any(t < 1 for t in ts):
            raise ValueError("timesteps must be >= 1")
        if any(b >= a for a, b in zip(ts[1:], ts)):
            raise ValueError(f"timesteps must be strictly ascending, got {ts}")
        if not self.kinds:
            raise ValueError("plan needs at least one module kind")
        if not self.scales:
            raise ValueError("plan needs at least one scale")
        if self.half not in (DECODER, ENCODER, "both"):
            raise ValueError(f"half must be decoder/encoder/both, got {self.half!r}")
        object.__setattr__(self, "timesteps", ts)
        object.__setattr__(self, "kinds", tuple((ModuleKind(k), b) for k, b in self.kinds))
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))

    @property
    def halves(self) -> tuple[str, ...]:
        base = (DECODER, ENCODER) if self.half == "both" else (self.half,)
        return base + ((MID,) if self.include_mid else ())

    def to_dict(self) -> dict:
        return {"timesteps": list(self.timesteps),
                "kinds": [[k.value, b] for k, b in self.kinds],
                "scales": list(self.scales),
                "half": self.half,
                "include_mid": self.include_mid}


def plan_from_dict(d: dict) -> ExtractionPlan:
    return ExtractionPlan(tuple(d["timesteps"]),
                          tuple((ModuleKind(k), b) for k, b in d["kinds"]),
                          tuple(d["scales"]), d.get("half", DECODER),
                          d.get("include_mid", False))


def default_plan() -> ExtractionPlan:
    """Residual + self-attention decoder blocks, all scales, early timesteps."""
    return ExtractionPlan(
        timesteps=(1, 100, 200),
        kinds=((ModuleKind.RESNET, None), (ModuleKind.SELF_ATTENTION, None)),
        scales=(1, 2, 3, 4),
        half=DECODER,
    )


def attention_to_grid(tokens: np.ndarray, height: int, width: int) -> np.ndarray:
    """(B, N, d) token sequence -> (B, d, height, width), row-major tokens."""
    b, n, d = tokens.shape
    if n != height * width:
        raise ValueError(f"{n} tokens do not tile a {height}x{width} grid")
    return np.ascontiguousarray(tokens.reshape(b, height, width, d).transpose(0, 3, 1, 2))


def grid_to_tokens(grid: np.ndarray) -> np.ndarray:
    b, d, h, w = grid.shape
    return np.ascontiguousarray(grid.transpose(0, 2, 3, 1).reshape(b, h * w, d))


class ExtractionError(RuntimeError):
    pass


class StackIOError(RuntimeError):
    pass


class FeatureStack:
    """Immutable container of captured feature maps keyed by StackKey."""

    def __init__(self, entries: dict[StackKey, np.ndarray], latent_hw: tuple[int, int]):
        self.latent_hw = (int(latent_hw[0]), int(latent_hw[1]))
        self.entries: dict[StackKey, np.ndarray] = {}
        batch = None
        for key, arr in entries.items():
            arr = np.asarray(arr)
            if arr.ndim != 4:
                raise ValueError(f"{key.encode()}: expected (B, d, h, w), got {arr.shape}")
            h_s = self.latent_hw[0] >> (key.scale - 1)
            w_s = self.latent_hw[1] >> (key.scale - 1)
            if arr.shape[2:] != (h_s, w_s):
                raise ValueError(
                    f"{key.encode()}: spatial dims {arr.shape[2:]} violate the scale rule {(h_s, w_s)}")
            if batch is None:
                batch = arr.shape[0]
            elif arr.shape[0] != batch:
                raise ValueError(f"{key.encode()}: batch {arr.shape[0]} != {batch}")
            arr.flags.writeable = False
            self.entries[key] = arr
        self.batch_size = 0 if batch is None else batch

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, key: StackKey) -> np.ndarray:
        return self.entries[key]

    def keys(self):
        return self.entries.keys()

    def items(self):
        return self.entries.items()

    @property
    def timesteps(self) -> tuple[int, ...]:
        return tuple(sorted({k.timestep for k in self.entries}))

    @property
    def scales(self) -> tuple[int, ...]:
        return tuple(sorted({k.scale for k in self.entries}))

    def scale_hw(self, scale: int) -> tuple[int, int]:
        return (self.latent_hw[0] >> (scale - 1), self.latent_hw[1] >> (scale - 1))

    def select(self, timesteps=None, kinds=None, scales=None, blocks=None) -> "FeatureStack":
        """Sub-stack view sharing the underlying arrays."""
        picked = {}
        for key, arr in self.entries.items():
            if timesteps is not None and key.timestep not in timesteps:
                continue
            if kinds is not None and key.kind not in kinds:
                continue
            if scales is not None and key.scale not in scales:
                continue
            if blocks is not None and key.block not in blocks:
                continue
            picked[key] = arr
        return FeatureStack(picked, self.latent_hw)

    def rows(self, batch_slice) -> "FeatureStack":
        """Sub-stack over a batch slice (shares memory for plain slices)."""
        return FeatureStack({k: a[batch_slice] for k, a in self.entries.items()}, self.latent_hw)


def select_plan_features(stack: FeatureStack, plan: ExtractionPlan) -> FeatureStack:
    """Sub-view of a superset stack restricted to a plan's selectors."""
    kinds = {k for k, _ in plan.kinds}
    blocks = (None if any(b is None for _, b in plan.kinds)
              else {b for _, b in plan.kinds})
    sub = stack.select(timesteps=set(plan.timesteps), kinds=kinds,
                       scales=set(plan.scales), blocks=blocks)
    missing_t = set(plan.timesteps) - {k.timestep for k in sub.keys()}
    missing_s = set(plan.scales) - {k.scale for k in sub.keys()}
    if missing_t or missing_s:
        raise ExtractionError(
            f"stack does not cover the plan: missing timesteps {sorted(missing_t)}, "
            f"missing scales {sorted(missing_s)}")
    return sub


def group_by_scale(stack: FeatureStack) -> dict[int, list[tuple[StackKey, np.ndarray]]]:
    """Per-scale groups, ordered timestep-major, then block, then kind.

    This ordering defines each feature's index within the fusion weights.
    """
    if len(stack) == 0:
        raise ValueError("cannot group an empty stack")
    groups: dict[int, list] = {}
    for key in sorted(stack.keys(), key=lambda k: (k.scale,) + k.order):
        groups.setdefault(key.scale, []).append((key, stack[key]))
    return groups


def resolve_taps(plan: ExtractionPlan, backbone) -> dict[int, list[tuple[TapSpec, StackKey]]]:
    """Match plan selectors against the backbone's tap inventory.

    Returns per-timestep-independent mapping: for each selected scale, the
    ordered (TapSpec, StackKey-template) pairs; the timestep field of the
    returned keys is 0 and is filled in by the caller.
    """
    available = list(backbone.available_taps())
    resolved: dict[int, list[tuple[TapSpec, StackKey]]] = {}
    for scale in plan.scales:
        chosen: list[TapSpec] = []
        for kind, block in plan.kinds:
            matches = [t for t in available
                       if t.scale == scale and t.kind == kind and t.half in plan.halves
                       and (block is None or t.block == block)]
            if not matches:
                raise ExtractionError(
                    f"plan references non-existent tap: scale={scale} kind={kind.value} "
                    f"block={block} halves={plan.halves}")
            chosen.extend(matches)
        chosen = sorted(set(chosen), key=lambda t: (t.kind.rank, _HALF_RANK[t.half], t.block))
        pairs = []
        index_within = {}
        for tap in chosen:
            l = index_within.get(tap.kind, 0)
            index_within[tap.kind] = l + 1
            pairs.append((tap, StackKey(0, scale, l, tap.kind)))
        resolved[scale] = pairs
    return resolved


def extract(images: np.ndarray, plan: ExtractionPlan, backbone, codec, schedule,
            context, inversion_stride: int = 1, batch_size: int = 16) -> FeatureStack:
    """Run the inversion + tapped denoising sweep over an image batch.

    Encodes to latents, DDIM-inverts once up to the largest planned
    timestep while recording the states at every planned timestep, then
    taps the denoiser at each of them. No gradients flow anywhere.
    """
    from .diffusion import ddim_invert

    if max(plan.timesteps) > schedule.total_steps:
        raise ValueError(f"plan timestep {max(plan.timesteps)} exceeds schedule T={schedule.total_steps}")
    resolved = resolve_taps(plan, backbone)
    taps = [tap for pairs in resolved.values() for tap, _ in pairs]
    images = np.asarray(images, dtype=np.float32)
    n = images.shape[0]
    collected: dict[StackKey, list[np.ndarray]] = {}
    with no_grad():
        for start in range(0, n, batch_size):
            z0 = codec.encode(images[start:start + batch_size])
            states = ddim_invert(z0, list(plan.timesteps), schedule, backbone, context,
                                 stride=inversion_stride)
            for t in plan.timesteps:
                _, captured = backbone.forward(states[t], t, context, taps=taps)
                for scale, pairs in resolved.items():
                    h_s, w_s = backbone.scale_hw(scale)
                    for tap, key_tpl in pairs:
                        arr = captured[tap]
                        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
                        if tap.kind != ModuleKind.RESNET:
                            arr = attention_to_grid(arr, h_s, w_s)
                        key = StackKey(t, key_tpl.scale, key_tpl.block, key_tpl.kind)
                        if not np.isfinite(arr).all():
                            raise ExtractionError(f"non-finite feature captured at {key.encode()}")
                        collected.setdefault(key, []).append(arr)
    entries = {k: (parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0))
               for k, parts in collected.items()}
    h0, w0 = backbone.latent_hw
    return FeatureStack(entries, (h0, w0))


# -- serialization -----------------------------------------------------------

def dump_stack(stack: FeatureStack, path, precision: str = "float16",
               extra_meta: dict | None = None) -> Path:
    """Write a named-array container plus a json sidecar; returns the array path."""
    if precision not in ("float16", "float32", "float64"):
        raise ValueError(f"unsupported precision {precision!r}")
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    dtype = np.dtype(precision)
    arrays = {key.encode(): arr.astype(dtype, copy=False) for key, arr in stack.items()}
    np.savez(path, **arrays)
    meta = {
        "stack_format_version": STACK_FORMAT_VERSION,
        "latent_hw": list(stack.latent_hw),
        "precision": precision,
        "num_entries": len(stack),
        "batch_size": stack.batch_size,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra_meta:
        meta.update(extra_meta)
    sidecar = path.with_suffix(".meta.json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_stack(path) -> FeatureStack:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    sidecar = path.with_suffix(".meta.json")
    if not sidecar.exists():
        raise StackIOError(f"missing sidecar metadata {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise StackIOError(f"corrupt sidecar {sidecar}: {e}") from e
    version = meta.get("stack_format_version")
    if version != STACK_FORMAT_VERSION:
        raise StackIOError(f"stack format version mismatch: file has {version}, "
                           f"reader supports {STACK_FORMAT_VERSION}")
    try:
        with np.load(path) as archive:
            entries = {decode_key(name): archive[name] for name in archive.files}
    except (zipfile.BadZipFile, OSError, ValueError, EOFError) as e:
        raise StackIOError(f"corrupt feature dump {path}: {e}") from e
    return FeatureStack(entries, tuple(meta["latent_hw"]))
