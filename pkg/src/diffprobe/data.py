"""Synthetic multi-scale benchmarks and folder-based dataset ingestion.

Generated scenes compose a textured background with small dots and large
ellipses of class-specific color and texture, so the same semantics appear
at very different object scales. Pixel-exact masks come for free. Content
is a pure function of the spec (seed included), so regeneration is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_FORMAT_VERSION = 1
RGB_BANDS = ("red", "green", "blue")


@dataclass(frozen=True)
class SyntheticSpec:
    num_train: int = 200
    num_val: int = 50
    num_test: int = 50
    image_size: int = 64
    num_classes: int = 5          # class 0 is background
    scale_mix: float = 0.5        # fraction of foreground objects drawn as small dots
    noise_level: float = 0.02     # additive sensor-like noise std, in [0,1] units
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes (background + one foreground)")
        if not 0.0 <= self.scale_mix <= 1.0:
            raise ValueError("scale_mix must lie in [0, 1]")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.num_train, "val": self.num_val, "test": self.num_test}

    def to_dict(self) -> dict:
        return {"num_train": self.num_train, "num_val": self.num_val,
                "num_test": self.num_test, "image_size": self.image_size,
                "num_classes": self.num_classes, "scale_mix": self.scale_mix,
                "noise_level": self.noise_level, "seed": self.seed}


@dataclass(frozen=True)
class DatasetRecord:
    image_path: str
    split: str
    bands: tuple[str, ...]
    label: int | None = None
    labels: tuple[int, ...] | None = None     # multi-label indicator vector
    mask_path: str | None = None
    class_pixel_counts: tuple[int, ...] | None = None
    sha256: str | None = None


def _class_palette(num_classes: int) -> np.ndarray:
    """Deterministic, well-separated base colors; class 0 is muted."""
    rng = np.random.default_rng(12345)
    colors = 0.25 + 0.6 * rng.random((num_classes, 3))
    colors[0] = (0.35, 0.4, 0.3)
    return colors


def _texture(c: int, h: int, w: int) -> np.ndarray:
    """Per-class deterministic texture pattern in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w]
    period = 3 + (c * 2) % 7
    if c % 3 == 0:
        pat = ((xx // period + yy // period) % 2).astype(np.float64)
    elif c % 3 == 1:
        pat = 0.5 * (1 + np.sin(2 * np.pi * xx / (period + 2)))
    else:
        pat = 0.5 * (1 + np.sin(2 * np.pi * (xx + yy) / (period + 3)))
    return pat


def render_from_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """Noise-free image as a pure function of the class mask: (3, H, W) in [0,1]."""
    h, w = mask.shape
    palette = _class_palette(num_classes)
    img = np.zeros((3, h, w), dtype=np.float64)
    for c in range(num_classes):
        sel = mask == c
        if not sel.any():
            continue
        tex = 0.75 + 0.25 * _texture(c, h, w)
        for band in range(3):
            img[band][sel] = palette[c, band] * tex[sel]
    return img


def _ellipse_mask(h: int, w: int, cy, cx, ay, ax, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    yr = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
    xr = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    return (yr / ay) ** 2 + (xr / ax) ** 2 <= 1.0


def _scene(spec: SyntheticSpec, rng: np.random.Generator, forced_class: int) -> np.ndarray:
    """Class mask for one scene; the forced class becomes the dominant object."""
    n = spec.image_size
    fg = list(range(1, spec.num_classes))
    mask = np.zeros((n, n), dtype=np.int64)
    n_objects = 4 + int(rng.integers(0, 4))
    n_small = int(round(n_objects * spec.scale_mix))
    n_large = max(n_objects - n_small, 1)
    for _ in range(n_large - 1):
        c = fg[int(rng.integers(0, len(fg)))]
        sel = _ellipse_mask(n, n, rng.uniform(0, n), rng.uniform(0, n),
                            rng.uniform(n * 0.09, n * 0.16), rng.uniform(n * 0.09, n * 0.16),
                            rng.uniform(0, np.pi))
        mask[sel] = c
    # dominant object, drawn late so it stays on top of other large regions
    sel = _ellipse_mask(n, n, rng.uniform(n * 0.25, n * 0.75), rng.uniform(n * 0.25, n * 0.75),
                        rng.uniform(n * 0.19, n * 0.26), rng.uniform(n * 0.19, n * 0.26),
                        rng.uniform(0, np.pi))
    mask[sel] = forced_class
    for _ in range(n_small):
        c = fg[int(rng.integers(0, len(fg)))]
        sel = _ellipse_mask(n, n, rng.uniform(0, n), rng.uniform(0, n),
                            rng.uniform(1.2, 3.0), rng.uniform(1.2, 3.0), 0.0)
        mask[sel] = c
    return mask


def _render_with_noise(mask: np.ndarray, spec: SyntheticSpec,
                       rng: np.random.Generator) -> np.ndarray:
    img = render_from_mask(mask, spec.num_classes)
    if spec.noise_level > 0:
        img = img + rng.normal(0.0, spec.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _save_png(arr: np.ndarray, path: Path) -> str:
    """uint8 PNG; returns the file's sha256."""
    if arr.ndim == 3:
        data = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(data, mode="RGB").save(path)
    else:
        Image.fromarray(arr.astype(np.uint8), mode="L").save(path)
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(root: Path, header: dict, records: list[dict]) -> Path:
    lines = [json.dumps({"kind": "header", **header}, sort_keys=True)]
    lines += [json.dumps({"kind": "record", **r}, sort_keys=True) for r in records]
    path = root / MANIFEST_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def _generate(spec: SyntheticSpec, root, task: str, multi_label: bool = False) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if task == "segmentation":
        (root / "masks").mkdir(exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    fg_count = spec.num_classes - 1
    records = []
    for split, count in spec.split_sizes().items():
        for i in range(count):
            forced = (i % fg_count) + 1
            mask = _scene(spec, rng, forced)
            img = _render_with_noise(mask, spec, rng)
            name = f"{split}_{i:05d}"
            img_rel = f"images/{name}.png"
            sha = _save_png(img, root / img_rel)
            counts = np.bincount(mask.ravel(), minlength=spec.num_classes)
            rec = {"image_path": img_rel, "split": split, "bands": list(RGB_BANDS),
                   "class_pixel_counts": counts.tolist(), "sha256": sha}
            if task == "segmentation":
                mask_rel = f"masks/{name}.png"
                _save_png(mask, root / mask_rel)
                rec["mask_path"] = mask_rel
            else:
                fg_counts = counts[1:]
                if multi_label:
                    rec["labels"] = (fg_counts > 0).astype(int).tolist()
                else:
                    rec["label"] = int(np.argmax(fg_counts))
            records.append(rec)
    label_kind = "mask" if task == "segmentation" else ("multilabel" if multi_label else "class")
    header = {
        "manifest_format_version": MANIFEST_FORMAT_VERSION,
        "task": task,
        "label_kind": label_kind,
        "num_classes": spec.num_classes if task == "segmentation" else fg_count,
        "bands": list(RGB_BANDS),
        "image_size": spec.image_size,
        "spec": spec.to_dict(),
    }
    return _write_manifest(root, header, records)


def generate_shapes_segmentation(spec: SyntheticSpec, root) -> Path:
    """Dataset of textured scenes with pixel-exact class masks; returns the manifest path."""
    return _generate(spec, root, "segmentation")


def generate_shapes_classification(spec: SyntheticSpec, root, multi_label: bool = False) -> Path:
    """Dominant-object labels (or presence vectors) over the same scene generator."""
    return _generate(spec, root, "classification", multi_label=multi_label)


class FolderDataset:
    """Lazy, stably ordered reader over a manifest-described folder."""

    def __init__(self, root, manifest: str = MANIFEST_NAME):
        self.root = Path(root)
        path = self.root / manifest
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        lines = path.read_text().strip().splitlines()
        if not lines:
            raise ValueError(f"empty manifest: {path}")
        header = json.loads(lines[0])
        if header.get("kind") != "header":
            raise ValueError(f"manifest {path} does not start with a header record")
        version = header.get("manifest_format_version")
        if version != MANIFEST_FORMAT_VERSION:
            raise ValueError(f"manifest version mismatch: {version}")
        self.header = header
        self.label_kind = header["label_kind"]
        self.num_classes = int(header["num_classes"])
        self.bands = tuple(header["bands"])
        self._records = []
        for line in lines[1:]:
            d = json.loads(line)
            self._records.append(DatasetRecord(
                image_path=d["image_path"], split=d["split"], bands=tuple(d["bands"]),
                label=d.get("label"),
                labels=tuple(d["labels"]) if d.get("labels") is not None else None,
                mask_path=d.get("mask_path"),
                class_pixel_counts=tuple(d["class_pixel_counts"]) if d.get("class_pixel_counts") else None,
                sha256=d.get("sha256")))

    def records(self, split: str | None = None) -> list[DatasetRecord]:
        if split is None:
            return list(self._records)
        return [r for r in self._records if r.split == split]

    def _resolve(self, rel: str) -> Path:
        path = self.root / rel
        if not path.exists():
            raise FileNotFoundError(f"manifest references a missing file: {path}")
        return path

    def load_image(self, record: DatasetRecord) -> np.ndarray:
        """(C, H, W) float32 in [0, 1] for PNG; raw planes for .npy stacks."""
        path = self._resolve(record.image_path)
        if path.suffix == ".npy":
            return np.load(path).astype(np.float32)
        arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return np.ascontiguousarray(arr.transpose(2, 0, 1))

    def load_mask(self, record: DatasetRecord) -> np.ndarray:
        if record.mask_path is None:
            raise ValueError("record carries no mask")
        path = self._resolve(record.mask_path)
        return np.asarray(Image.open(path), dtype=np.int64)


def load_folder_dataset(root, manifest: str = MANIFEST_NAME) -> FolderDataset:
    return FolderDataset(root, manifest)


def stratification_key(record: DatasetRecord) -> int:
    """Class used for stratified subsampling.

    Classification: the label. Multi-label: the rarest-looking positive bit
    (lowest index among positives). Segmentation: the dominant foreground
    class by pixel count.
    """
    if record.label is not None:
        return int(record.label)
    if record.labels is not None:
        positives = [i for i, v in enumerate(record.labels) if v]
        return positives[0] if positives else -1
    if record.class_pixel_counts is not None:
        counts = np.asarray(record.class_pixel_counts[1:])
        return int(np.argmax(counts)) + 1
    raise ValueError("record has no label information to stratify on")


def subsample_labels(records: list[DatasetRecord], fraction: float, seed: int) -> list[DatasetRecord]:
    """Deterministic stratified subsample preserving per-class proportions.

    Classes whose share would round to zero keep one sample (with a warning).
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(records)
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(stratification_key(r), []).append(i)
    chosen: list[int] = []
    for cls in sorted(by_class):
        idx = by_class[cls]
        want = int(round(fraction * len(idx)))
        if want == 0:
            warnings.warn(f"label fraction {fraction} floors class {cls} to one sample")
            want = 1
        pick = rng.choice(len(idx), size=want, replace=False)
        chosen.extend(idx[int(p)] for p in sorted(pick))
    chosen.sort()
    return [records[i] for i in chosen]
