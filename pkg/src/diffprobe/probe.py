"""Probe training and evaluation: frozen backbone, learnable fusion + head.

Features are extracted once per split and cached in memory; with
augmentation enabled the training split is re-augmented and re-extracted
every epoch instead. The backbone never enters the gradient graph, and its
parameter checksum is verified across the whole run.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import config_checksum
from .data import load_folder_dataset, subsample_labels
from .denoiser import load_backbone
from .features import (ExtractionPlan, FeatureStack, default_plan, extract, group_by_scale,
                       plan_from_dict, select_plan_features)
from .fusion import MoEConfig, build_fusion, fuse_pyramid, simple_concat
from .heads import (LinearHead, LinearHeadConfig, LossSpec, SegDecoder, SegDecoderConfig,
                    compute_loss)
from .metrics import accuracy, compute_miou, f1_from_labels, f1_scores
from .optim import AdamW, warmup_cosine_lr
from .transforms import augment as augment_sample
from .transforms import compute_band_stats, match_bands, normalize_bands

REQUIRED_BANDS = ("red", "green", "blue")


class ProbeDivergence(RuntimeError):
    pass


@dataclass
class ProbeRun:
    """Everything that determines one probe training/evaluation job."""

    dataset_root: str
    backbone_path: str
    plan: ExtractionPlan = field(default_factory=default_plan)
    strategy: str = "global"
    d_out: tuple[int, ...] = (64, 96, 128, 160)
    moe: dict = field(default_factory=dict)
    fpn_channels: int = 128
    ppm_bins: tuple[int, ...] = (1, 2, 3, 6)
    lr: float = 0.01
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    label_fraction: float = 1.0
    augment: bool = False
    inversion_stride: int = 1
    extraction_batch: int = 16
    required_bands: tuple[str, ...] = REQUIRED_BANDS
    ignore_index: int | None = None

    def __post_init__(self):
        if not 0.0 < self.label_fraction <= 1.0:
            raise ValueError("label_fraction must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return {"dataset_root": str(self.dataset_root),
                "backbone_path": str(self.backbone_path),
                "plan": self.plan.to_dict(), "strategy": self.strategy,
                "d_out": list(self.d_out), "moe": dict(self.moe),
                "fpn_channels": self.fpn_channels, "ppm_bins": list(self.ppm_bins),
                "lr": self.lr, "weight_decay": self.weight_decay,
                "warmup_epochs": self.warmup_epochs, "epochs": self.epochs,
                "batch_size": self.batch_size, "seed": self.seed,
                "label_fraction": self.label_fraction, "augment": self.augment,
                "inversion_stride": self.inversion_stride,
                "extraction_batch": self.extraction_batch,
                "required_bands": list(self.required_bands),
                "ignore_index": self.ignore_index}

    def checksum(self) -> str:
        return config_checksum(self.to_dict())


def probe_run_from_dict(d: dict) -> ProbeRun:
    d = dict(d)
    if isinstance(d.get("plan"), dict):
        d["plan"] = plan_from_dict(d["plan"])
    for key in ("d_out", "ppm_bins", "required_bands"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    return ProbeRun(**d)


@dataclass
class MetricsReport:
    task: str
    strategy: str
    seed: int
    train_loss_per_epoch: list[float]
    val_metric_per_epoch: list[float]
    best_epoch: int
    final: dict
    wall_clock_sec: float
    config_checksum: str
    backbone_checksum: str

    def to_dict(self) -> dict:
        return {"task": self.task, "strategy": self.strategy, "seed": self.seed,
                "train_loss_per_epoch": self.train_loss_per_epoch,
                "val_metric_per_epoch": self.val_metric_per_epoch,
                "best_epoch": self.best_epoch, "final": self.final,
                "wall_clock_sec": self.wall_clock_sec,
                "config_checksum": self.config_checksum,
                "backbone_checksum": self.backbone_checksum}

    def primary_metric(self) -> float:
        if self.task == "mask":
            return self.final["miou"]
        if self.task == "multilabel":
            return self.final["f1_micro"]
        return self.final["accuracy"]


# -- data plumbing -----------------------------------------------------------


def _load_split_arrays(dataset, records, stats, required_bands):
    images, targets = [], []
    for r in records:
        img = normalize_bands(dataset.load_image(r), r.bands, stats)
        images.append(match_bands(img, r.bands, tuple(required_bands)))
        if dataset.label_kind == "mask":
            targets.append(dataset.load_mask(r))
        elif dataset.label_kind == "multilabel":
            targets.append(np.asarray(r.labels, dtype=np.float32))
        else:
            targets.append(r.label)
    return np.stack(images).astype(np.float32), np.asarray(targets)


def _extract_stack(images, run: ProbeRun, backbone, codec, schedule, context) -> FeatureStack:
    return extract(images, run.plan, backbone, codec, schedule, context,
                   inversion_stride=run.inversion_stride, batch_size=run.extraction_batch)


def _pyramid_for(strategy, fusion, stack: FeatureStack):
    if strategy == "concat":
        return simple_concat(stack)
    return fuse_pyramid(stack, strategy, fusion)


def _build_modules(run: ProbeRun, template: FeatureStack, task: str, num_classes: int, seeds):
    fusion = build_fusion(run.strategy, template, d_out=run.d_out, seed=seeds[0],
                          moe_config=MoEConfig(**run.moe) if run.moe else None)
    probe_stack = template.rows(slice(0, 1))
    channels = _pyramid_for(run.strategy, fusion, probe_stack).channels()
    if task == "mask":
        head = SegDecoder(channels, SegDecoderConfig(
            num_classes=num_classes, fpn_channels=run.fpn_channels,
            ppm_bins=run.ppm_bins), seed=seeds[1])
    else:
        head = LinearHead(channels, LinearHeadConfig(
            num_classes=num_classes, multi_label=(task == "multilabel")), seed=seeds[1])
    return fusion, head


def _loss_spec(task: str, run: ProbeRun) -> LossSpec:
    if task == "multilabel":
        return LossSpec(kind="bce-with-logits")
    return LossSpec(ignore_index=run.ignore_index)


def _forward(run, fusion, head, stack, image_hw):
    pyramid = _pyramid_for(run.strategy, fusion, stack)
    if isinstance(head, SegDecoder):
        return head(pyramid, image_hw=image_hw)
    return head(pyramid)


def _eval_metrics(run, fusion, head, stack, targets, task, num_classes, image_hw,
                  batch_size=64) -> dict:
    preds = []
    probs = []
    with ag.no_grad():
        for start in range(0, stack.batch_size, batch_size):
            rows = stack.rows(slice(start, start + batch_size))
            logits = _forward(run, fusion, head, rows, image_hw).data
            if task == "multilabel":
                probs.append(1.0 / (1.0 + np.exp(-logits)))
            else:
                preds.append(np.argmax(logits, axis=1))
    out: dict = {}
    if task == "mask":
        pred = np.concatenate(preds, axis=0)
        res = compute_miou(pred, targets, num_classes, ignore_index=run.ignore_index)
        valid = targets != run.ignore_index if run.ignore_index is not None else slice(None)
        out["miou"] = res.miou
        out["per_class_iou"] = [None if np.isnan(v) else float(v) for v in res.per_class]
        out["accuracy"] = accuracy(pred[valid], targets[valid])
        f1 = f1_from_labels(pred[valid].ravel(), targets[valid].ravel(), num_classes)
        out["f1_micro"], out["f1_macro"] = f1["micro"], f1["macro"]
    elif task == "multilabel":
        prob = np.concatenate(probs, axis=0)
        pred = prob >= 0.5
        f1 = f1_scores(pred, targets >= 0.5)
        out["f1_micro"], out["f1_macro"] = f1["micro"], f1["macro"]
        out["accuracy"] = float((pred == (targets >= 0.5)).mean())
        out["miou"] = None
        out["per_class_iou"] = None
    else:
        pred = np.concatenate(preds, axis=0)
        out["accuracy"] = accuracy(pred, targets)
        f1 = f1_from_labels(pred, targets, num_classes)
        out["f1_micro"], out["f1_macro"] = f1["micro"], f1["macro"]
        out["miou"] = None
        out["per_class_iou"] = None
    return out


def _named_probe_tensors(fusion, head, strategy) -> dict[str, np.ndarray]:
    tensors = {}
    if fusion is not None:
        for name, value in fusion.state_dict().items():
            tensors[f"fusion.{strategy}.{name}"] = value
    for name, value in head.state_dict().items():
        tensors[f"head.{name}"] = value
    return tensors


def train_probe(run: ProbeRun, out_dir=None, log=None,
                stacks: dict[str, FeatureStack] | None = None) -> tuple[Path | None, MetricsReport]:
    """Train fusion + head on frozen-backbone features; returns the written
    checkpoint path (if ``out_dir`` given) and the metrics report.

    ``stacks`` may hold pre-extracted full-split FeatureStacks (in manifest
    record order, covering at least the run's plan); sweeps use this to
    share one extraction pass across many probes.
    """
    t_start = time.perf_counter()
    say = log or (lambda msg: None)
    dataset = load_folder_dataset(run.dataset_root)
    task = dataset.label_kind
    num_classes = dataset.num_classes
    backbone, schedule, context, codec, _ = load_backbone(run.backbone_path)
    checksum_before = backbone.checksum()

    ss = np.random.SeedSequence(run.seed)
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(4)]
    order_rng = np.random.default_rng(seeds[2])
    augment_rng = np.random.default_rng(seeds[3])

    stats = compute_band_stats(dataset, "train")
    train_records_full = dataset.records("train")
    if run.label_fraction < 1.0:
        train_records = subsample_labels(train_records_full, run.label_fraction, run.seed)
    else:
        train_records = train_records_full
    train_images, train_targets = _load_split_arrays(dataset, train_records, stats,
                                                     run.required_bands)
    val_images, val_targets = _load_split_arrays(dataset, dataset.records("val"), stats,
                                                 run.required_bands)
    test_images, test_targets = _load_split_arrays(dataset, dataset.records("test"), stats,
                                                   run.required_bands)
    if train_images.shape[0] == 0 or val_images.shape[0] == 0 or test_images.shape[0] == 0:
        raise ValueError("dataset must provide non-empty train/val/test splits")
    image_hw = train_images.shape[2:]

    if stacks is not None:
        if run.augment:
            raise ValueError("pre-extracted stacks cannot serve augmented training")
        selected = {split: select_plan_features(stacks[split], run.plan)
                    for split in ("train", "val", "test")}
        for split, count in (("train", len(train_records_full)),
                             ("val", val_images.shape[0]), ("test", test_images.shape[0])):
            if selected[split].batch_size != count:
                raise ValueError(f"{split} stack rows {selected[split].batch_size} "
                                 f"do not match the split size {count}")
        if run.label_fraction < 1.0:
            pos = {id(r): i for i, r in enumerate(train_records_full)}
            rows = np.asarray([pos[id(r)] for r in train_records], dtype=np.int64)
            train_stack = selected["train"].rows(rows)
        else:
            train_stack = selected["train"]
        val_stack, test_stack = selected["val"], selected["test"]
    else:
        say(f"extracting features: train={train_images.shape[0]} val={val_images.shape[0]} "
            f"test={test_images.shape[0]}")
        train_stack = _extract_stack(train_images, run, backbone, codec, schedule, context)
        val_stack = _extract_stack(val_images, run, backbone, codec, schedule, context)
        test_stack = _extract_stack(test_images, run, backbone, codec, schedule, context)

    fusion, head = _build_modules(run, train_stack, task, num_classes, seeds)
    spec = _loss_spec(task, run)
    params = (fusion.parameters() if fusion is not None else []) + head.parameters()
    optimizer = AdamW(params, lr=run.lr, weight_decay=run.weight_decay)
    moe_coef = float(run.moe.get("load_balance_coef", 0.0)) if run.moe else 0.0

    train_losses: list[float] = []
    val_metrics: list[float] = []
    best_metric = -np.inf
    best_epoch = -1
    best_state = _named_probe_tensors(fusion, head, run.strategy)

    n = train_stack.batch_size
    for epoch in range(run.epochs):
        optimizer.lr = warmup_cosine_lr(epoch, run.lr, run.warmup_epochs, run.epochs)
        if run.augment:
            aug_images = np.empty_like(train_images)
            aug_targets = train_targets.copy()
            for i in range(train_images.shape[0]):
                m = train_targets[i] if task == "mask" else None
                img, m = augment_sample(train_images[i], m, augment_rng)
                aug_images[i] = img
                if task == "mask":
                    aug_targets[i] = m
            epoch_stack = _extract_stack(aug_images, run, backbone, codec, schedule, context)
            epoch_targets = aug_targets
        else:
            epoch_stack, epoch_targets = train_stack, train_targets
        order = order_rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, run.batch_size):
            idx = order[start:start + run.batch_size]
            batch_stack = epoch_stack.rows(idx)
            logits = _forward(run, fusion, head, batch_stack, image_hw)
            loss = compute_loss(logits, epoch_targets[idx], spec)
            if moe_coef and getattr(fusion, "last_aux_loss", None) is not None:
                loss = loss + fusion.last_aux_loss * moe_coef
            value = loss.item()
            if not np.isfinite(value):
                path = None
                if out_dir is not None:
                    path = save_checkpoint(Path(out_dir) / "last_good.npz", best_state,
                                           {"kind": "probe", "run": run.to_dict(),
                                            "config_checksum": run.checksum(),
                                            "diverged_at_epoch": epoch})
                raise ProbeDivergence(
                    f"non-finite training loss at epoch {epoch}"
                    + (f"; last-good checkpoint written to {path}" if path else ""))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += value
            batches += 1
        train_losses.append(epoch_loss / max(batches, 1))
        val_eval = _eval_metrics(run, fusion, head, val_stack, val_targets, task,
                                 num_classes, image_hw)
        metric = val_eval["miou"] if task == "mask" else (
            val_eval["f1_micro"] if task == "multilabel" else val_eval["accuracy"])
        val_metrics.append(metric)
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_state = _named_probe_tensors(fusion, head, run.strategy)
        say(f"epoch {epoch}: lr={optimizer.lr:.5f} loss={train_losses[-1]:.4f} "
            f"val={metric:.4f}")

    # restore the best-on-validation parameters before the final evaluation
    if run.epochs > 0 and fusion is not None:
        fusion.load_state_dict({k[len(f"fusion.{run.strategy}."):]: v
                                for k, v in best_state.items()
                                if k.startswith("fusion.")})
    if run.epochs > 0:
        head.load_state_dict({k[len("head."):]: v for k, v in best_state.items()
                              if k.startswith("head.")})

    final = _eval_metrics(run, fusion, head, test_stack, test_targets, task,
                          num_classes, image_hw)
    checksum_after = backbone.checksum()
    if checksum_after != checksum_before:
        raise RuntimeError("backbone parameters changed during probe training")

    report = MetricsReport(
        task=task, strategy=run.strategy, seed=run.seed,
        train_loss_per_epoch=train_losses, val_metric_per_epoch=val_metrics,
        best_epoch=best_epoch, final=final,
        wall_clock_sec=time.perf_counter() - t_start,
        config_checksum=run.checksum(), backbone_checksum=checksum_after)

    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = save_checkpoint(
            out_dir / "probe.npz", _named_probe_tensors(fusion, head, run.strategy),
            {"kind": "probe", "run": run.to_dict(), "config_checksum": run.checksum(),
             "task": task, "num_classes": num_classes, "strategy": run.strategy,
             "backbone_checksum": checksum_after, "best_epoch": best_epoch,
             "image_hw": list(image_hw)})
        write_report(report, out_dir)
    return ckpt_path, report


def write_report(report: MetricsReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "metrics.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    csv_path = out_dir / "sweep.csv"
    row = {"strategy": report.strategy, "task": report.task, "seed": report.seed,
           "best_epoch": report.best_epoch,
           "miou": report.final.get("miou"), "accuracy": report.final.get("accuracy"),
           "f1_micro": report.final.get("f1_micro"), "f1_macro": report.final.get("f1_macro"),
           "config_checksum": report.config_checksum}
    new_file = not csv_path.exists()
    with csv_path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        if new_file:
            writer.writeheader()
        writer.writerow(row)
    return path


def rebuild_probe(ckpt_path):
    """Reconstruct (run, fusion, head, task, num_classes, image_hw) from a probe checkpoint."""
    tensors, meta = load_checkpoint(ckpt_path)
    if meta.get("kind") != "probe":
        raise CheckpointError(f"{ckpt_path} is not a probe checkpoint")
    run = probe_run_from_dict(meta["run"])
    if run.checksum() != meta["config_checksum"]:
        raise CheckpointError("probe checkpoint config checksum mismatch")
    dataset = load_folder_dataset(run.dataset_root)
    backbone, schedule, context, codec, _ = load_backbone(run.backbone_path)
    stats = compute_band_stats(dataset, "train")
    sample = dataset.records("train")[:1]
    images, _ = _load_split_arrays(dataset, sample, stats, run.required_bands)
    template = _extract_stack(images, run, backbone, codec, schedule, context)
    ss = np.random.SeedSequence(run.seed)
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(4)]
    fusion, head = _build_modules(run, template, meta["task"], meta["num_classes"], seeds)
    prefix = f"fusion.{run.strategy}."
    fusion_state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    head_state = {k[len("head."):]: v for k, v in tensors.items() if k.startswith("head.")}
    try:
        if fusion is not None:
            fusion.load_state_dict(fusion_state)
        head.load_state_dict(head_state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"probe checkpoint schema mismatch: {e}") from e
    return run, fusion, head, meta, (dataset, backbone, schedule, context, codec, stats)


def evaluate(ckpt_path, split: str = "test") -> MetricsReport:
    """Metrics of a stored probe over a split; no parameter updates."""
    t0 = time.perf_counter()
    run, fusion, head, meta, assets = rebuild_probe(ckpt_path)
    dataset, backbone, schedule, context, codec, stats = assets
    records = dataset.records(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    images, targets = _load_split_arrays(dataset, records, stats, run.required_bands)
    stack = _extract_stack(images, run, backbone, codec, schedule, context)
    final = _eval_metrics(run, fusion, head, stack, targets, meta["task"],
                          meta["num_classes"], tuple(meta["image_hw"]))
    return MetricsReport(task=meta["task"], strategy=run.strategy, seed=run.seed,
                         train_loss_per_epoch=[], val_metric_per_epoch=[],
                         best_epoch=meta.get("best_epoch", -1), final=final,
                         wall_clock_sec=time.perf_counter() - t0,
                         config_checksum=meta["config_checksum"],
                         backbone_checksum=backbone.checksum())
