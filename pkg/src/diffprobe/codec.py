"""Pluggable image<->latent codecs.

The denoising backbone operates on latents; the codec fixes the latent
geometry. All codecs are frozen: encode/decode never participate in
gradient graphs.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .autograd import Tensor, no_grad


class _AffineLatents:
    """Shared shift/scale applied after encoding, inverted before decoding.

    Mirrors the latent-diffusion convention of rescaling codec outputs so
    the diffusing variable is roughly unit variance.
    """

    def __init__(self, shift: float = 0.0, scale: float = 1.0):
        if scale == 0:
            raise ValueError("latent scale must be nonzero")
        self.shift = float(shift)
        self.scale = float(scale)

    def _post_encode(self, z: np.ndarray) -> np.ndarray:
        if self.shift == 0.0 and self.scale == 1.0:
            return z
        return ((z - self.shift) * self.scale).astype(z.dtype, copy=False)

    def _pre_decode(self, z: np.ndarray) -> np.ndarray:
        if self.shift == 0.0 and self.scale == 1.0:
            return z
        return (z / self.scale + self.shift).astype(z.dtype, copy=False)

    def _affine_dict(self) -> dict:
        return {"shift": self.shift, "scale": self.scale}


class IdentityCodec(_AffineLatents):
    kind = "identity"

    def __init__(self, channels: int = 3, shift: float = 0.0, scale: float = 1.0):
        super().__init__(shift, scale)
        self.channels = channels
        self.spatial_factor = 1

    def latent_channels(self) -> int:
        return self.channels

    def encode(self, images: np.ndarray) -> np.ndarray:
        return self._post_encode(np.asarray(images))

    def decode(self, latents: np.ndarray) -> np.ndarray:
        return self._pre_decode(np.asarray(latents))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, **self._affine_dict()}


class PatchifyCodec(_AffineLatents):
    """Space-to-depth: stride x stride pixel blocks become channel groups.

    Exactly invertible at the default affine (shift 0, scale 1), so the
    latent/image distinction costs nothing.
    """

    kind = "patchify"

    def __init__(self, channels: int = 3, stride: int = 2,
                 shift: float = 0.0, scale: float = 1.0):
        super().__init__(shift, scale)
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.channels = channels
        self.stride = stride
        self.spatial_factor = stride

    def latent_channels(self) -> int:
        return self.channels * self.stride * self.stride

    def encode(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images)
        b, c, h, w = x.shape
        s = self.stride
        if h % s or w % s:
            raise ValueError(f"image dims {(h, w)} not divisible by stride {s}")
        x = x.reshape(b, c, h // s, s, w // s, s)
        z = np.ascontiguousarray(x.transpose(0, 1, 3, 5, 2, 4)).reshape(b, c * s * s, h // s, w // s)
        return self._post_encode(z)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        z = self._pre_decode(np.asarray(latents))
        b, cz, hz, wz = z.shape
        s = self.stride
        c = cz // (s * s)
        z = z.reshape(b, c, s, s, hz, wz)
        return np.ascontiguousarray(z.transpose(0, 1, 4, 2, 5, 3)).reshape(b, c, hz * s, wz * s)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "stride": self.stride,
                **self._affine_dict()}


class TinyAutoencoderCodec(_AffineLatents):
    """Small frozen convolutional autoencoder with a stride-2 bottleneck.

    Weights are a pure function of the seed; reconstruction fidelity is not
    a goal, only the latent/image geometry contract.
    """

    kind = "tiny-autoencoder"

    def __init__(self, channels: int = 3, latent_dim: int = 12, seed: int = 0,
                 shift: float = 0.0, scale: float = 1.0):
        super().__init__(shift, scale)
        self.channels = channels
        self.latent_dim = latent_dim
        self.seed = seed
        self.spatial_factor = 2
        rng = np.random.default_rng(seed)
        self._enc1 = nn.Conv2d(channels, latent_dim, 3, rng, stride=2, padding=1)
        self._enc2 = nn.Conv2d(latent_dim, latent_dim, 3, rng)
        self._dec1 = nn.Conv2d(latent_dim, latent_dim, 3, rng)
        self._dec2 = nn.Conv2d(latent_dim, channels, 3, rng)
        for block in (self._enc1, self._enc2, self._dec1, self._dec2):
            block.freeze()

    def latent_channels(self) -> int:
        return self.latent_dim

    def encode(self, images: np.ndarray) -> np.ndarray:
        from . import autograd as ag
        with no_grad():
            h = ag.tanh(self._enc1(Tensor(np.asarray(images, dtype=np.float32))))
            return self._post_encode(self._enc2(h).data)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        from . import autograd as ag
        with no_grad():
            z = self._pre_decode(np.asarray(latents, dtype=np.float32))
            h = ag.upsample_nearest2x(Tensor(z))
            return self._dec2(ag.tanh(self._dec1(h))).data

    def to_dict(self) -> dict:
        return {"kind": self.kind, "channels": self.channels,
                "latent_dim": self.latent_dim, "seed": self.seed,
                **self._affine_dict()}


def build_codec(spec: dict | str | None = None, channels: int = 3):
    """Codec factory from a config mapping (or bare kind string)."""
    if spec is None:
        spec = {"kind": "patchify"}
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind", "patchify")
    channels = int(spec.get("channels", channels))
    shift = float(spec.get("shift", 0.0))
    scale = float(spec.get("scale", 1.0))
    if kind == "identity":
        return IdentityCodec(channels, shift=shift, scale=scale)
    if kind == "patchify":
        return PatchifyCodec(channels, stride=int(spec.get("stride", 2)),
                             shift=shift, scale=scale)
    if kind == "tiny-autoencoder":
        return TinyAutoencoderCodec(channels, latent_dim=int(spec.get("latent_dim", 12)),
                                    seed=int(spec.get("seed", 0)), shift=shift, scale=scale)
    raise ValueError(f"unknown codec kind {kind!r}")
