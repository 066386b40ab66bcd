"""Toy latent-space denoising U-Net with tappable intermediate blocks.

Four scales, one residual block and one transformer block (self-attention,
cross-attention against a fixed conditioning sequence, feed-forward) per
scale in both halves. Any block output can be captured through a TapSpec;
attention taps return the output-projection activations as token sequences,
before the residual add.

Third-party backbones can stand in for this class by matching the small
surface ``extract`` relies on: ``latent_hw``, ``latent_channels``,
``num_scales``, ``scale_hw(s)``, ``available_taps()``, ``checksum()`` and
``forward(x_t, t, context, taps=None) -> (eps_hat, {TapSpec: payload})``
where payloads are (B, C, h, w) for residual taps and (B, h*w, C) token
sequences for attention taps. ``ConstantPredictionDenoiser`` below is a
minimal reference implementation of that contract.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .features import DECODER, ENCODER, MID, ModuleKind, TapSpec


@dataclass(frozen=True)
class DenoiserConfig:
    num_scales: int = 4
    channels_per_scale: tuple[int, ...] = (32, 64, 96, 128)
    blocks_per_scale: int = 1
    attention_heads: int = 1
    context_dim: int = 64
    context_tokens: int = 4
    latent_channels: int = 12
    latent_height: int = 32
    latent_width: int = 32
    time_embed_dim: int = 128
    ff_expansion: int = 2

    def __post_init__(self):
        if len(self.channels_per_scale) != self.num_scales:
            raise ValueError("channels_per_scale length must equal num_scales")
        if self.blocks_per_scale < 1 or self.attention_heads < 1:
            raise ValueError("blocks_per_scale and attention_heads must be >= 1")
        factor = 1 << (self.num_scales - 1)
        if self.latent_height % factor or self.latent_width % factor:
            raise ValueError(
                f"latent size {(self.latent_height, self.latent_width)} must be divisible by {factor}")

    def scale_hw(self, scale: int) -> tuple[int, int]:
        if not 1 <= scale <= self.num_scales:
            raise ValueError(f"scale {scale} outside [1, {self.num_scales}]")
        return (self.latent_height >> (scale - 1), self.latent_width >> (scale - 1))

    def to_dict(self) -> dict:
        return {"num_scales": self.num_scales,
                "channels_per_scale": list(self.channels_per_scale),
                "blocks_per_scale": self.blocks_per_scale,
                "attention_heads": self.attention_heads,
                "context_dim": self.context_dim,
                "context_tokens": self.context_tokens,
                "latent_channels": self.latent_channels,
                "latent_height": self.latent_height,
                "latent_width": self.latent_width,
                "time_embed_dim": self.time_embed_dim,
                "ff_expansion": self.ff_expansion}


def config_from_dict(d: dict) -> DenoiserConfig:
    d = dict(d)
    if "channels_per_scale" in d:
        d["channels_per_scale"] = tuple(d["channels_per_scale"])
    return DenoiserConfig(**d)


@dataclass(frozen=True)
class ConditioningContext:
    """Frozen conditioning token sequence standing in for a fixed prompt."""

    embedding: np.ndarray
    label: str = "fixed conditioning"

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float32)
        emb.flags.writeable = False
        object.__setattr__(self, "embedding", emb)

    def checksum(self) -> str:
        return hashlib.sha256(self.embedding.tobytes()).hexdigest()

    @staticmethod
    def create(tokens: int, dim: int, seed: int = 0, label: str = "fixed conditioning"):
        rng = np.random.default_rng(seed)
        return ConditioningContext(rng.standard_normal((tokens, dim)).astype(np.float32), label)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int, rng):
        super().__init__()
        self.norm1 = nn.GroupNorm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, rng)
        self.temb_proj = nn.Linear(temb_dim, c_out, rng)
        self.norm2 = nn.GroupNorm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng, zero_init=True)
        self.skip = nn.Conv2d(c_in, c_out, 1, rng, bias=False) if c_in != c_out else None

    def __call__(self, x, temb):
        h = self.conv1(ag.silu(self.norm1(x)))
        shift = self.temb_proj(ag.silu(temb))
        h = h + ag.reshape(shift, shift.shape + (1, 1))
        h = self.conv2(ag.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention, cross-attention, feed-forward on token grids."""

    def __init__(self, dim: int, heads: int, context_dim: int, expansion: int, rng):
        super().__init__()
        self.norm_sa = nn.LayerNorm(dim)
        self.self_attn = nn.Attention(dim, rng, heads=heads)
        self.norm_ca = nn.LayerNorm(dim)
        self.cross_attn = nn.Attention(dim, rng, heads=heads, context_dim=context_dim)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = nn.FeedForward(dim, rng, expansion=expansion)

    def __call__(self, x, context, want_weights: bool = False):
        b, c, h, w = x.shape
        tokens = ag.transpose(ag.reshape(x, (b, c, h * w)), (0, 2, 1))
        if want_weights:
            sa_out, sa_weights = self.self_attn(self.norm_sa(tokens), return_weights=True)
        else:
            sa_out = self.self_attn(self.norm_sa(tokens))
            sa_weights = None
        tokens = tokens + sa_out
        ca_out = self.cross_attn(self.norm_ca(tokens), context=context)
        tokens = tokens + ca_out
        tokens = tokens + self.ff(self.norm_ff(tokens))
        out = ag.reshape(ag.transpose(tokens, (0, 2, 1)), (b, c, h, w))
        return out, sa_out, ca_out, sa_weights


class _ScaleStage(nn.Module):
    """blocks_per_scale x (ResBlock + TransformerBlock) at one resolution."""

    def __init__(self, c_in: int, c_out: int, cfg: DenoiserConfig, rng):
        super().__init__()
        self.pairs = []
        for i in range(cfg.blocks_per_scale):
            res = ResBlock(c_in if i == 0 else c_out, c_out, cfg.time_embed_dim, rng)
            tfm = TransformerBlock(c_out, cfg.attention_heads, cfg.context_dim,
                                   cfg.ff_expansion, rng)
            setattr(self, f"res{i}", res)
            setattr(self, f"tfm{i}", tfm)
            self.pairs.append((res, tfm))


class UNetDenoiser(nn.Module):
    """Noise-prediction network; returns requested block activations on the side."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        ch = config.channels_per_scale
        s = config.num_scales
        temb = config.time_embed_dim

        self.time_mlp1 = nn.Linear(ch[0], temb, rng)
        self.time_mlp2 = nn.Linear(temb, temb, rng)
        self.stem = nn.Conv2d(config.latent_channels, ch[0], 3, rng)

        self.enc_stages = []
        self.down = []
        for i in range(s):
            stage = _ScaleStage(ch[i], ch[i], config, rng)
            setattr(self, f"enc{i}", stage)
            self.enc_stages.append(stage)
            if i < s - 1:
                d = nn.Conv2d(ch[i], ch[i + 1], 3, rng, stride=2, padding=1)
                setattr(self, f"down{i}", d)
                self.down.append(d)

        self.mid_res1 = ResBlock(ch[-1], ch[-1], temb, rng)
        self.mid_tfm = TransformerBlock(ch[-1], config.attention_heads, config.context_dim,
                                        config.ff_expansion, rng)
        self.mid_res2 = ResBlock(ch[-1], ch[-1], temb, rng)

        self.dec_stages = []
        self.up = []
        for i in range(s - 1, -1, -1):
            stage = _ScaleStage(ch[i] * 2, ch[i], config, rng)
            setattr(self, f"dec{i}", stage)
            self.dec_stages.append(stage)  # deepest first
            if i > 0:
                u = nn.Conv2d(ch[i], ch[i - 1], 3, rng)
                setattr(self, f"up{i}", u)
                self.up.append(u)

        self.out_norm = nn.GroupNorm(ch[0])
        # the head also sees the raw input (long skip): the dominant component
        # of the noise target is the input itself, and a narrow toy trunk
        # recovers it too slowly without this path
        self.out_conv = nn.Conv2d(ch[0] + config.latent_channels,
                                  config.latent_channels, 3, rng, zero_init=True)

    # -- geometry / introspection ------------------------------------------
    @property
    def latent_hw(self) -> tuple[int, int]:
        return (self.config.latent_height, self.config.latent_width)

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    @property
    def num_scales(self) -> int:
        return self.config.num_scales

    def scale_hw(self, scale: int) -> tuple[int, int]:
        return self.config.scale_hw(scale)

    def available_taps(self) -> list[TapSpec]:
        taps = []
        kinds = (ModuleKind.RESNET, ModuleKind.SELF_ATTENTION, ModuleKind.CROSS_ATTENTION)
        for half in (DECODER, ENCODER):
            for scale in range(1, self.config.num_scales + 1):
                for block in range(self.config.blocks_per_scale):
                    for kind in kinds:
                        taps.append(TapSpec(scale, half, kind, block))
        for kind in kinds:
            taps.append(TapSpec(self.config.num_scales, MID, kind, 0))
        return taps

    def _validate_taps(self, taps) -> set[TapSpec]:
        wanted = set(taps)
        known = set(self.available_taps())
        bad = wanted - known
        if bad:
            spec = sorted(bad, key=lambda t: (t.scale, t.half, t.kind.rank, t.block))[0]
            raise ValueError(
                f"tap request references non-existent block: scale={spec.scale} "
                f"half={spec.half} kind={spec.kind.value} block={spec.block}")
        return wanted

    # -- forward --------------------------------------------------------------
    def forward(self, x_t, t, context: ConditioningContext, taps=None,
                capture_attention: TapSpec | None = None):
        """Predict the noise content of ``x_t`` at timestep ``t``.

        Returns ``(eps_hat, captured)`` where captured maps each requested
        TapSpec to its activation (residual taps: (B,C,h,w); attention taps:
        (B, h*w, C) tokens). ``capture_attention`` additionally stores the
        softmax attention weights of that block under key "attention".
        """
        wanted = self._validate_taps(taps) if taps else set()
        if capture_attention is not None:
            self._validate_taps([capture_attention])
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=np.float32))
        b = x.shape[0]
        if x.shape[1:] != (self.config.latent_channels, *self.latent_hw):
            raise ValueError(f"latent shape {x.shape[1:]} does not match config "
                             f"{(self.config.latent_channels, *self.latent_hw)}")
        t_arr = np.full(b, t, dtype=np.int64) if np.isscalar(t) else np.asarray(t, dtype=np.int64)
        emb = nn.sinusoidal_embedding(t_arr, self.config.channels_per_scale[0],
                                      dtype=x.dtype.type)
        temb = self.time_mlp2(ag.silu(self.time_mlp1(Tensor(emb))))
        ctx = Tensor(context.embedding.astype(x.dtype.type, copy=False))

        captured: dict = {}
        attn_store: dict = {}

        def run_stage(stage, half, scale, h, tb):
            for block, (res, tfm) in enumerate(stage.pairs):
                h = res(h, tb)
                res_tap = TapSpec(scale, half, ModuleKind.RESNET, block)
                if res_tap in wanted:
                    captured[res_tap] = h
                want_w = (capture_attention is not None
                          and capture_attention.scale == scale
                          and capture_attention.half == half
                          and capture_attention.block == block)
                h, sa_out, ca_out, sa_w = tfm(h, ctx, want_weights=want_w)
                sa_tap = TapSpec(scale, half, ModuleKind.SELF_ATTENTION, block)
                ca_tap = TapSpec(scale, half, ModuleKind.CROSS_ATTENTION, block)
                if sa_tap in wanted:
                    captured[sa_tap] = sa_out
                if ca_tap in wanted:
                    captured[ca_tap] = ca_out
                if want_w:
                    attn_store["attention"] = sa_w
            return h

        h = self.stem(x)
        skips = []
        for i, stage in enumerate(self.enc_stages):
            h = run_stage(stage, ENCODER, i + 1, h, temb)
            skips.append(h)
            if i < self.config.num_scales - 1:
                h = self.down[i](h)

        s_top = self.config.num_scales
        h = self.mid_res1(h, temb)
        if TapSpec(s_top, MID, ModuleKind.RESNET, 0) in wanted:
            captured[TapSpec(s_top, MID, ModuleKind.RESNET, 0)] = h
        want_mid_w = (capture_attention is not None and capture_attention.half == MID)
        h, sa_out, ca_out, sa_w = self.mid_tfm(h, ctx, want_weights=want_mid_w)
        if TapSpec(s_top, MID, ModuleKind.SELF_ATTENTION, 0) in wanted:
            captured[TapSpec(s_top, MID, ModuleKind.SELF_ATTENTION, 0)] = sa_out
        if TapSpec(s_top, MID, ModuleKind.CROSS_ATTENTION, 0) in wanted:
            captured[TapSpec(s_top, MID, ModuleKind.CROSS_ATTENTION, 0)] = ca_out
        if want_mid_w:
            attn_store["attention"] = sa_w
        h = self.mid_res2(h, temb)

        for idx, stage in enumerate(self.dec_stages):
            scale = self.config.num_scales - idx
            h = ag.concatenate([h, skips[scale - 1]], axis=1)
            h = run_stage(stage, DECODER, scale, h, temb)
            if scale > 1:
                h = self.up[idx](ag.upsample_nearest2x(h))

        head_in = ag.concatenate([ag.silu(self.out_norm(h)), x], axis=1)
        eps_hat = self.out_conv(head_in)
        captured.update(attn_store)
        return eps_hat, captured

    __call__ = forward


def save_backbone(path, denoiser: UNetDenoiser, schedule, context: ConditioningContext,
                  codec, seed: int, training_steps: int, extra_meta: dict | None = None):
    """Write denoiser weights + conditioning embedding with full rebuild metadata."""
    from .checkpoint import save_checkpoint

    tensors = {f"denoiser.{k}": v for k, v in denoiser.state_dict().items()}
    tensors["context.embedding"] = context.embedding
    meta = {
        "kind": "backbone",
        "denoiser_config": denoiser.config.to_dict(),
        "schedule": schedule.to_dict(),
        "codec": codec.to_dict(),
        "context_label": context.label,
        "seed": seed,
        "training_steps": training_steps,
        "param_checksum": denoiser.checksum(),
    }
    if extra_meta:
        meta.update(extra_meta)
    return save_checkpoint(path, tensors, meta)


def load_backbone(path):
    """Rebuild (denoiser, schedule, context, codec, meta) from a checkpoint."""
    from .checkpoint import CheckpointError, load_checkpoint
    from .codec import build_codec
    from .schedule import schedule_from_dict

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "backbone":
        raise CheckpointError(f"{path} is not a backbone checkpoint (kind={meta.get('kind')!r})")
    config = config_from_dict(meta["denoiser_config"])
    denoiser = UNetDenoiser(config, seed=int(meta.get("seed", 0)))
    state = {k[len("denoiser."):]: v for k, v in tensors.items() if k.startswith("denoiser.")}
    denoiser.load_state_dict(state)
    denoiser.freeze()
    context = ConditioningContext(tensors["context.embedding"],
                                  meta.get("context_label", "fixed conditioning"))
    schedule = schedule_from_dict(meta["schedule"])
    codec = build_codec(meta["codec"])
    if meta.get("param_checksum") and denoiser.checksum() != meta["param_checksum"]:
        raise CheckpointError(f"{path}: parameter checksum mismatch after load")
    return denoiser, schedule, context, codec, meta


class ConstantPredictionDenoiser:
    """Minimal third-party-backbone stand-in: predicts a constant noise field.

    Implements the full tap contract so adapter plumbing can be exercised
    without real weights; tap payloads are deterministic functions of the
    input so shape and determinism checks stay meaningful.
    """

    def __init__(self, latent_channels: int = 12, latent_hw: tuple[int, int] = (32, 32),
                 num_scales: int = 4, channels_per_scale=(8, 8, 8, 8), value: float = 0.0):
        self.latent_channels = latent_channels
        self.latent_hw = latent_hw
        self.num_scales = num_scales
        self.channels_per_scale = tuple(channels_per_scale)
        self.value = value

    def scale_hw(self, scale: int) -> tuple[int, int]:
        return (self.latent_hw[0] >> (scale - 1), self.latent_hw[1] >> (scale - 1))

    def available_taps(self) -> list[TapSpec]:
        taps = []
        for half in (DECODER, ENCODER):
            for scale in range(1, self.num_scales + 1):
                for kind in (ModuleKind.RESNET, ModuleKind.SELF_ATTENTION,
                             ModuleKind.CROSS_ATTENTION):
                    taps.append(TapSpec(scale, half, kind, 0))
        return taps

    def checksum(self) -> str:
        return hashlib.sha256(f"constant:{self.value}".encode()).hexdigest()

    def forward(self, x_t, t, context, taps=None, capture_attention=None):
        x = np.asarray(x_t.data if hasattr(x_t, "data") else x_t)
        eps = np.full_like(x, self.value)
        captured = {}
        known = set(self.available_taps())
        for tap in taps or ():
            if tap not in known:
                raise ValueError(f"tap request references non-existent block: {tap}")
            c = self.channels_per_scale[tap.scale - 1]
            h, w = self.scale_hw(tap.scale)
            base = x.mean(axis=(1, 2, 3), keepdims=True).reshape(-1, 1, 1, 1)
            grid = np.broadcast_to(base, (x.shape[0], c, h, w)).astype(x.dtype) + float(t)
            if tap.kind == ModuleKind.RESNET:
                captured[tap] = grid.copy()
            else:
                captured[tap] = np.ascontiguousarray(
                    grid.transpose(0, 2, 3, 1).reshape(x.shape[0], h * w, c))
        return eps, captured

    __call__ = forward
