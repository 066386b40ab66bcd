"""Command-line entry point.

Commands: gen-data, pretrain, extract, train, eval, ablate, viz-weights,
viz-features, viz-experts, viz-attention. Every command takes a YAML config
(--config) with dotted --set overrides, writes its outputs under --out, and
drops a run record (config echo, seed, version, checksums) next to them.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, apply_overrides, config_checksum, load_config

OUT_ROOT_ENV = "DIFFPROBE_OUT"


def _default_out(command: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return Path(root) / command


def _resolve_config(args) -> dict:
    cfg = load_config(args.config) if args.config else {}
    cfg = apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.device == "gpu":
        raise ConfigError("gpu backend is not available in this build; use --device cpu")
    return cfg


def _write_run_record(out_dir: Path, command: str, cfg: dict, outputs: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_checksum": config_checksum(cfg),
        "seed": cfg.get("seed"),
        "outputs": {k: str(v) for k, v in outputs.items()},
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- command handlers --------------------------------------------------------


def cmd_gen_data(cfg: dict, out_dir: Path) -> dict:
    from .data import SyntheticSpec, generate_shapes_classification, generate_shapes_segmentation

    task = cfg.get("task", "segmentation")
    spec_fields = {k: cfg[k] for k in ("num_train", "num_val", "num_test", "image_size",
                                       "num_classes", "scale_mix", "noise_level", "seed")
                   if k in cfg}
    spec = SyntheticSpec(**spec_fields)
    if task == "segmentation":
        manifest = generate_shapes_segmentation(spec, out_dir)
    elif task == "classification":
        manifest = generate_shapes_classification(spec, out_dir)
    elif task == "multilabel":
        manifest = generate_shapes_classification(spec, out_dir, multi_label=True)
    else:
        raise ConfigError(f"unknown gen-data task {task!r}")
    _say(f"wrote {task} dataset under {out_dir}")
    return {"manifest": manifest}


def cmd_pretrain(cfg: dict, out_dir: Path) -> dict:
    from .codec import build_codec
    from .data import load_folder_dataset
    from .denoiser import ConditioningContext, DenoiserConfig, UNetDenoiser, save_backbone
    from .diffusion import pretrain_denoiser
    from .schedule import build_linear_schedule
    from .transforms import compute_band_stats, match_bands, normalize_bands

    if "dataset_root" not in cfg:
        raise ConfigError("pretrain needs dataset_root")
    dataset = load_folder_dataset(cfg["dataset_root"])
    seed = int(cfg.get("seed", 0))
    bands = tuple(cfg.get("required_bands", ("red", "green", "blue")))
    codec = build_codec(cfg.get("codec"), channels=len(bands))
    image_size = int(dataset.header.get("image_size"))
    latent_hw = image_size // codec.spatial_factor

    den_cfg = dict(cfg.get("denoiser", {}))
    den_cfg.setdefault("latent_channels", codec.latent_channels())
    den_cfg.setdefault("latent_height", latent_hw)
    den_cfg.setdefault("latent_width", latent_hw)
    if "channels_per_scale" in den_cfg:
        den_cfg["channels_per_scale"] = tuple(den_cfg["channels_per_scale"])
    config = DenoiserConfig(**den_cfg)

    sched_cfg = cfg.get("schedule", {})
    schedule = build_linear_schedule(int(sched_cfg.get("total_steps", 1000)),
                                     float(sched_cfg.get("beta_start", 1e-4)),
                                     float(sched_cfg.get("beta_end", 0.02)))
    denoiser = UNetDenoiser(config, seed=seed)
    context = ConditioningContext.create(config.context_tokens, config.context_dim,
                                         seed=seed + 1)

    stats = compute_band_stats(dataset, "train")
    images = []
    for record in dataset.records("train"):
        img = normalize_bands(dataset.load_image(record), record.bands, stats)
        images.append(match_bands(img, record.bands, bands))
    images = np.stack(images).astype(np.float32)

    if bool(cfg.get("normalize_latents", True)):
        # bake the latent standardization into the codec so every consumer
        # of the checkpoint sees the same latent convention
        raw = codec.encode(images)
        codec_spec = codec.to_dict()
        codec_spec["shift"] = float(raw.mean())
        codec_spec["scale"] = float(1.0 / max(raw.std(), 1e-8))
        codec = build_codec(codec_spec)
        _say(f"latent standardization: shift={codec.shift:.4f} scale={codec.scale:.4f}")

    steps = int(cfg.get("steps", 2000))
    t0 = time.perf_counter()
    history = pretrain_denoiser(
        images, codec, schedule, denoiser, context, steps=steps, seed=seed,
        batch_size=int(cfg.get("batch_size", 8)), lr=float(cfg.get("lr", 2e-3)),
        log_every=int(cfg.get("log_every", 100)),
        on_log=lambda step, loss: _say(f"step {step}: loss={loss:.4f}"))
    _say(f"pretrained {steps} steps in {time.perf_counter() - t0:.1f}s")

    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = save_backbone(out_dir / "backbone.npz", denoiser, schedule, context, codec,
                         seed=seed, training_steps=steps,
                         extra_meta={"band_stats": stats.to_dict(),
                                     "required_bands": list(bands)})
    (out_dir / "loss_history.json").write_text(json.dumps(
        {"steps": steps, "loss": history}, indent=2))
    return {"checkpoint": ckpt, "loss_history": out_dir / "loss_history.json"}


def _plan_from_cfg(cfg: dict):
    from .features import default_plan, plan_from_dict

    if "plan" in cfg:
        return plan_from_dict(cfg["plan"])
    return default_plan()


def cmd_extract(cfg: dict, out_dir: Path) -> dict:
    from .data import load_folder_dataset
    from .denoiser import load_backbone
    from .features import dump_stack, extract
    from .probe import _load_split_arrays
    from .transforms import compute_band_stats

    for key in ("dataset_root", "backbone_path"):
        if key not in cfg:
            raise ConfigError(f"extract needs {key}")
    dataset = load_folder_dataset(cfg["dataset_root"])
    backbone, schedule, context, codec, _ = load_backbone(cfg["backbone_path"])
    stats = compute_band_stats(dataset, "train")
    plan = _plan_from_cfg(cfg)
    bands = tuple(cfg.get("required_bands", ("red", "green", "blue")))
    outputs = {}
    out_dir.mkdir(parents=True, exist_ok=True)
    for split in cfg.get("splits", ("train", "val", "test")):
        records = dataset.records(split)
        if not records:
            _say(f"split {split}: empty, skipped")
            continue
        images, _ = _load_split_arrays(dataset, records, stats, bands)
        t0 = time.perf_counter()
        stack = extract(images, plan, backbone, codec, schedule, context,
                        inversion_stride=int(cfg.get("inversion_stride", 1)),
                        batch_size=int(cfg.get("extraction_batch", 16)))
        path = dump_stack(stack, out_dir / f"features_{split}.npz",
                          precision=cfg.get("precision", "float16"),
                          extra_meta={"plan": plan.to_dict(), "split": split,
                                      "backbone_checksum": backbone.checksum()})
        _say(f"split {split}: {len(stack)} entries x {stack.batch_size} rows "
             f"in {time.perf_counter() - t0:.1f}s -> {path}")
        outputs[split] = path
    return outputs


def cmd_train(cfg: dict, out_dir: Path) -> dict:
    from .probe import probe_run_from_dict, train_probe

    for key in ("dataset_root", "backbone_path"):
        if key not in cfg:
            raise ConfigError(f"train needs {key}")
    payload = {k: v for k, v in cfg.items() if k != "plan"}
    if "plan" in cfg:
        payload["plan"] = cfg["plan"]
    try:
        run = probe_run_from_dict(payload)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad probe config: {e}") from e
    ckpt, report = train_probe(run, out_dir=out_dir, log=_say)
    _say(f"final metrics: {json.dumps(report.final)}")
    return {"checkpoint": ckpt, "metrics": out_dir / "metrics.json"}


def cmd_eval(cfg: dict, out_dir: Path) -> dict:
    from .probe import evaluate

    if "checkpoint" not in cfg:
        raise ConfigError("eval needs checkpoint")
    report = evaluate(cfg["checkpoint"], split=cfg.get("split", "test"))
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "eval_metrics.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    _say(f"{cfg.get('split', 'test')} metrics: {json.dumps(report.final)}")
    return {"metrics": path}


def cmd_ablate(cfg: dict, out_dir: Path) -> dict:
    from .ablate import run_ablation

    for key in ("dataset_root", "backbone_path"):
        if key not in cfg:
            raise ConfigError(f"ablate needs {key}")
    result = run_ablation(cfg, out_dir, log=_say)
    return {"csv": result["csv"], "report": result["report"]}


def cmd_viz_weights(cfg: dict, out_dir: Path) -> dict:
    from .viz import viz_weights

    if "checkpoint" not in cfg:
        raise ConfigError("viz-weights needs checkpoint")
    out = viz_weights(cfg["checkpoint"], out_dir)
    return {"heatmap": out["heatmap"], "matrix": out["matrix"]}


def cmd_viz_features(cfg: dict, out_dir: Path) -> dict:
    from .viz import viz_features

    if "checkpoint" not in cfg:
        raise ConfigError("viz-features needs checkpoint")
    out = viz_features(cfg["checkpoint"], out_dir, split=cfg.get("split", "test"),
                       num_images=int(cfg.get("num_images", 1)))
    return {"panels": ", ".join(out["panels"])}


def cmd_viz_experts(cfg: dict, out_dir: Path) -> dict:
    from .viz import viz_experts

    if "checkpoint" not in cfg:
        raise ConfigError("viz-experts needs checkpoint")
    out = viz_experts(cfg["checkpoint"], out_dir, split=cfg.get("split", "test"),
                      scale=cfg.get("scale"))
    return {"panels": ", ".join(out["panels"])}


def cmd_viz_attention(cfg: dict, out_dir: Path) -> dict:
    from .viz import viz_attention

    for key in ("backbone_path", "dataset_root"):
        if key not in cfg:
            raise ConfigError(f"viz-attention needs {key}")
    out = viz_attention(cfg["backbone_path"], cfg["dataset_root"], out_dir,
                        timestep=int(cfg.get("timestep", 100)),
                        scale=int(cfg.get("scale", 1)),
                        query=tuple(cfg.get("query", (0, 0))),
                        split=cfg.get("split", "test"))
    return {"overlay": out["path"]}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "extract": cmd_extract,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "viz-weights": cmd_viz_weights,
    "viz-features": cmd_viz_features,
    "viz-experts": cmd_viz_experts,
    "viz-attention": cmd_viz_attention,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffprobe",
        description="Frozen diffusion features, fused, probed.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument("--device", choices=("cpu", "gpu"), default="cpu")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    out_dir = Path(args.out) if args.out else _default_out(args.command)
    try:
        outputs = HANDLERS[args.command](cfg, out_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    _write_run_record(out_dir, args.command, cfg, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
