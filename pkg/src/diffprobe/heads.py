"""Task heads consuming a fused pyramid, and the training losses.

The classification head is a single affine map over pooled-and-concatenated
pyramid levels. The segmentation decoder follows the familiar
pyramid-pooling + top-down lateral-fusion layout, normalized per sample
(GroupNorm) so predictions never depend on batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .fusion import FusedPyramid


@dataclass(frozen=True)
class LinearHeadConfig:
    num_classes: int
    multi_label: bool = False

    def __post_init__(self):
        minimum = 1 if self.multi_label else 2
        if self.num_classes < minimum:
            raise ValueError(f"num_classes must be >= {minimum}")


class LinearHead(nn.Module):
    """Global-average pool each level, concatenate, one affine map."""

    def __init__(self, channels: dict[int, int], cfg: LinearHeadConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.scales = tuple(sorted(channels))
        self.in_dim = sum(channels[s] for s in self.scales)
        self.affine = nn.Linear(self.in_dim, cfg.num_classes, rng)

    def pooled(self, pyramid: FusedPyramid) -> Tensor:
        parts = []
        for s in self.scales:
            if s not in pyramid.maps:
                raise ValueError(f"pyramid is missing scale {s}")
            parts.append(ag.tensor_mean(pyramid[s], axis=(2, 3)))
        vec = parts[0] if len(parts) == 1 else ag.concatenate(parts, axis=1)
        if vec.shape[1] != self.in_dim:
            raise ValueError(f"pooled dim {vec.shape[1]} does not match head dim {self.in_dim}")
        return vec

    def __call__(self, pyramid: FusedPyramid) -> Tensor:
        return self.affine(self.pooled(pyramid))


@dataclass(frozen=True)
class SegDecoderConfig:
    num_classes: int
    fpn_channels: int = 128
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    output_stride: int = 2

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not self.ppm_bins:
            raise ValueError("ppm_bins must be non-empty")


class _ConvBlock(nn.Module):
    def __init__(self, c_in, c_out, kernel, rng):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel, rng)
        self.norm = nn.GroupNorm(c_out)

    def __call__(self, x):
        return ag.silu(self.norm(self.conv(x)))


class SegDecoder(nn.Module):
    """Pyramid pooling on the coarsest level, top-down lateral fusion, then
    upsample-concatenate-fuse at the finest level and classify."""

    def __init__(self, channels: dict[int, int], cfg: SegDecoderConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.scales = tuple(sorted(channels))
        fpn = cfg.fpn_channels
        top = self.scales[-1]
        branch_dim = max(fpn // len(cfg.ppm_bins), 4)
        self.ppm_branches = []
        for i, _ in enumerate(cfg.ppm_bins):
            branch = _ConvBlock(channels[top], branch_dim, 1, rng)
            setattr(self, f"ppm{i}", branch)
            self.ppm_branches.append(branch)
        self.ppm_fuse = _ConvBlock(channels[top] + branch_dim * len(cfg.ppm_bins), fpn, 3, rng)
        self.laterals = {}
        self.fpn_convs = {}
        for s in self.scales[:-1]:
            lateral = _ConvBlock(channels[s], fpn, 1, rng)
            fuse = _ConvBlock(fpn, fpn, 3, rng)
            setattr(self, f"lateral_s{s}", lateral)
            setattr(self, f"fpnconv_s{s}", fuse)
            self.laterals[s] = lateral
            self.fpn_convs[s] = fuse
        self.final_fuse = _ConvBlock(fpn * len(self.scales), fpn, 3, rng)
        self.classifier = nn.Conv2d(fpn, cfg.num_classes, 1, rng)

    def __call__(self, pyramid: FusedPyramid, image_hw: tuple[int, int] | None = None) -> Tensor:
        for s in self.scales:
            if s not in pyramid.maps:
                raise ValueError(f"pyramid is missing scale {s}")
        top = self.scales[-1]
        x_top = pyramid[top]
        th, tw = x_top.shape[2], x_top.shape[3]
        branches = [x_top]
        for bins, branch in zip(self.cfg.ppm_bins, self.ppm_branches):
            pooled = ag.adaptive_avg_pool2d(x_top, (bins, bins))
            branches.append(ag.bilinear_resize(branch(pooled), (th, tw)))
        nodes = {top: self.ppm_fuse(ag.concatenate(branches, axis=1))}
        for s in reversed(self.scales[:-1]):
            h, w = pyramid[s].shape[2], pyramid[s].shape[3]
            above = ag.bilinear_resize(nodes[self._next_above(s)], (h, w))
            nodes[s] = self.fpn_convs[s](self.laterals[s](pyramid[s]) + above)
        finest = self.scales[0]
        fh, fw = pyramid[finest].shape[2], pyramid[finest].shape[3]
        stacked = [ag.bilinear_resize(nodes[s], (fh, fw)) for s in self.scales]
        fused = self.final_fuse(ag.concatenate(stacked, axis=1))
        logits = self.classifier(fused)
        if image_hw is None:
            image_hw = (fh * self.cfg.output_stride, fw * self.cfg.output_stride)
        return ag.bilinear_resize(logits, tuple(image_hw))

    def _next_above(self, s: int) -> int:
        idx = self.scales.index(s)
        return self.scales[idx + 1]


# -- losses ---------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    kind: str = "cross-entropy"
    class_weights: tuple[float, ...] | None = None
    ignore_index: int | None = None

    def __post_init__(self):
        if self.kind not in ("cross-entropy", "bce-with-logits"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))


def _cross_entropy_flat(logits: Tensor, targets: np.ndarray, spec: LossSpec) -> Tensor:
    n, k = logits.shape
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        bad = targets[(targets < 0) | (targets >= k)][0]
        raise ValueError(f"target class {bad} outside [0, {k})")
    lsm = ag.log_softmax(logits, axis=-1)
    nll = -ag.reshape(ag.gather_last(lsm, targets[:, None].astype(np.int64)), (n,))
    if spec.class_weights is not None:
        w = np.asarray(spec.class_weights, dtype=logits.dtype.type)
        if w.shape[0] != k:
            raise ValueError(f"class weight vector has {w.shape[0]} entries for {k} classes")
        sample_w = Tensor(w[targets])
        return ag.tensor_sum(nll * sample_w) / float(w[targets].sum())
    return ag.tensor_mean(nll)


def compute_loss(logits: Tensor, targets: np.ndarray, spec: LossSpec) -> Tensor:
    """Mean-reduced loss.

    cross-entropy: integer targets, (B,) for (B,K) logits or (B,H,W) for
    (B,K,H,W) logits; pixels equal to ``ignore_index`` drop out entirely.
    bce-with-logits: {0,1} float targets shaped like the logits.
    """
    targets = np.asarray(targets)
    if spec.kind == "bce-with-logits":
        if targets.shape != tuple(logits.shape):
            raise ValueError(f"BCE targets {targets.shape} must match logits {tuple(logits.shape)}")
        y = Tensor(targets.astype(logits.dtype.type))
        # max(x,0) - x*y + log(1 + exp(-|x|)), elementwise-stable
        softplus = ag.log(ag.exp(-ag.absolute(logits)) + 1.0)
        return ag.tensor_mean(ag.relu(logits) - logits * y + softplus)

    if logits.ndim == 2:
        if targets.shape != (logits.shape[0],):
            raise ValueError(f"targets {targets.shape} must be ({logits.shape[0]},)")
        return _cross_entropy_flat(logits, targets.astype(np.int64), spec)

    if logits.ndim == 4:
        b, k, h, w = logits.shape
        if targets.shape != (b, h, w):
            raise ValueError(f"targets {targets.shape} must be {(b, h, w)}")
        flat_logits = ag.reshape(ag.transpose(logits, (0, 2, 3, 1)), (b * h * w, k))
        flat_targets = targets.reshape(-1).astype(np.int64)
        if spec.ignore_index is not None:
            valid = flat_targets != spec.ignore_index
            if not valid.any():
                return Tensor(np.zeros((), dtype=logits.dtype))
            flat_logits = ag.take_rows(flat_logits, np.nonzero(valid)[0])
            flat_targets = flat_targets[valid]
        return _cross_entropy_flat(flat_logits, flat_targets, spec)

    raise ValueError(f"unsupported logits rank {logits.ndim}")
