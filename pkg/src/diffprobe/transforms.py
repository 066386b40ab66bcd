"""Input normalization, band matching, and training-time augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BandStats:
    """Per-band minima and maxima, computed once over a full training split."""

    mins: dict[str, float]
    maxs: dict[str, float]

    def to_dict(self) -> dict:
        return {"mins": dict(self.mins), "maxs": dict(self.maxs)}

    @staticmethod
    def from_dict(d: dict) -> "BandStats":
        return BandStats(dict(d["mins"]), dict(d["maxs"]))


def compute_band_stats(dataset, split: str = "train") -> BandStats:
    """Min/max of every band across all images of a split."""
    mins: dict[str, float] = {}
    maxs: dict[str, float] = {}
    for record in dataset.records(split):
        img = dataset.load_image(record)
        for i, band in enumerate(record.bands):
            lo, hi = float(img[i].min()), float(img[i].max())
            mins[band] = min(mins.get(band, lo), lo)
            maxs[band] = max(maxs.get(band, hi), hi)
    if not mins:
        raise ValueError(f"split {split!r} holds no images to compute stats over")
    return BandStats(mins, maxs)


def normalize_bands(images: np.ndarray, bands: tuple[str, ...], stats: BandStats) -> np.ndarray:
    """Per-band (x - min) / (max - min) into [0, 1]; constant bands map to 0.

    Accepts (C, H, W) or (B, C, H, W).
    """
    single = images.ndim == 3
    x = images[None] if single else images
    if x.shape[1] != len(bands):
        raise ValueError(f"{x.shape[1]} channels for {len(bands)} declared bands")
    out = np.empty_like(x, dtype=np.float32)
    for i, band in enumerate(bands):
        if band not in stats.mins:
            raise KeyError(f"band stats missing band {band!r}")
        lo, hi = stats.mins[band], stats.maxs[band]
        if hi <= lo:
            out[:, i] = 0.0
        else:
            out[:, i] = (x[:, i] - lo) / (hi - lo)
    return out[0] if single else out


def denormalize_bands(images: np.ndarray, bands: tuple[str, ...], stats: BandStats) -> np.ndarray:
    single = images.ndim == 3
    x = images[None] if single else images
    out = np.empty_like(x, dtype=np.float32)
    for i, band in enumerate(bands):
        lo, hi = stats.mins[band], stats.maxs[band]
        out[:, i] = x[:, i] * (hi - lo) + lo
    return out[0] if single else out


def match_bands(image: np.ndarray, bands: tuple[str, ...],
                required: tuple[str, ...]) -> np.ndarray:
    """Reorder channels to ``required``; bands the image lacks become zeros."""
    if not required:
        raise ValueError("required band list is empty")
    if image.shape[0] != len(bands):
        raise ValueError(f"{image.shape[0]} channels for {len(bands)} declared bands")
    out = np.zeros((len(required),) + image.shape[1:], dtype=image.dtype)
    index = {b: i for i, b in enumerate(bands)}
    for j, band in enumerate(required):
        if band in index:
            out[j] = image[index[band]]
    return out


def augment(image: np.ndarray, mask: np.ndarray | None, rng: np.random.Generator,
            p: float = 0.5, jitter: float = 0.2) -> tuple[np.ndarray, np.ndarray | None]:
    """Random horizontal/vertical flips and color jitter, each with its own
    independent probability draw.

    Geometric transforms apply to the mask identically; color jitter never
    touches it. Draw order is fixed so a given generator state yields the
    same augmentation regardless of input content.
    """
    img = np.asarray(image)
    out = img
    if rng.random() < p:
        out = out[:, :, ::-1]
        if mask is not None:
            mask = mask[:, ::-1]
    if rng.random() < p:
        out = out[:, ::-1, :]
        if mask is not None:
            mask = mask[::-1, :]
    do_jitter = rng.random() < p
    b_factor = rng.uniform(1.0 - jitter, 1.0 + jitter)
    c_factor = rng.uniform(1.0 - jitter, 1.0 + jitter)
    s_factor = rng.uniform(1.0 - jitter, 1.0 + jitter)
    if do_jitter:
        out = out.astype(np.float32) * b_factor
        mean = out.mean()
        out = (out - mean) * c_factor + mean
        gray = out.mean(axis=0, keepdims=True)
        out = gray + (out - gray) * s_factor
        out = np.clip(out, 0.0, 1.0)
    return np.ascontiguousarray(out), (None if mask is None else np.ascontiguousarray(mask))
