"""Sweeps over (timestep x block-kind) raw-feature probes plus fusion baselines.

One extraction pass covers the whole grid: a superset stack per split is
extracted once and every cell trains on a sub-view of it.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .data import load_folder_dataset  # noqa: E402
from .denoiser import load_backbone  # noqa: E402
from .features import ExtractionPlan, ModuleKind  # noqa: E402
from .probe import ProbeRun, _extract_stack, _load_split_arrays, probe_run_from_dict, train_probe  # noqa: E402
from .transforms import compute_band_stats  # noqa: E402

DEFAULT_STRATEGIES = ("concat", "global", "localized", "moe")


def _kind(name: str) -> ModuleKind:
    return ModuleKind(name)


def build_grid(cfg: dict) -> tuple[list[dict], list[dict]]:
    """(raw cells, baseline rows) from a sweep config."""
    timesteps = [int(t) for t in cfg.get("raw_timesteps", (1, 100, 200))]
    kinds = [str(k) for k in cfg.get("kinds", ("resnet", "selfattn"))]
    strategies = [str(s) for s in cfg.get("strategies", DEFAULT_STRATEGIES)]
    seeds = [int(s) for s in cfg.get("seeds", (0,))]
    raw = [{"timestep": t, "kind": k, "seed": seed}
           for seed in seeds for t in timesteps for k in kinds]
    base = [{"strategy": s, "seed": seed} for seed in seeds for s in strategies]
    if not raw and not base:
        raise ValueError("ablation grid is empty")
    return raw, base


def run_ablation(cfg: dict, out_dir, log=None) -> dict:
    """Train every grid cell and baseline; emit CSV, plots, and a json report."""
    say = log or (lambda msg: None)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw_cells, baselines = build_grid(cfg)
    raw_timesteps = sorted({c["timestep"] for c in raw_cells})
    base_timesteps = [int(t) for t in cfg.get("baseline_timesteps", (1, 100, 200))]
    kinds = [str(k) for k in cfg.get("kinds", ("resnet", "selfattn"))]
    scales = tuple(cfg.get("scales", (1, 2, 3, 4)))
    probe_cfg = dict(cfg.get("probe", {}))
    stride = int(cfg.get("inversion_stride", probe_cfg.get("inversion_stride", 1)))

    superset = ExtractionPlan(
        timesteps=tuple(sorted(set(raw_timesteps) | set(base_timesteps))),
        kinds=tuple((_kind(k), None) for k in kinds),
        scales=scales)

    def make_run(plan, strategy, seed) -> ProbeRun:
        payload = {"dataset_root": str(cfg["dataset_root"]),
                   "backbone_path": str(cfg["backbone_path"]),
                   "strategy": strategy, "seed": seed,
                   "inversion_stride": stride, **probe_cfg}
        run = probe_run_from_dict(payload)
        run.plan = plan
        return run

    say(f"extracting superset stack: timesteps={superset.timesteps} kinds={kinds}")
    template_run = make_run(superset, "concat", 0)
    dataset = load_folder_dataset(cfg["dataset_root"])
    backbone, schedule, context, codec, _ = load_backbone(cfg["backbone_path"])
    stats = compute_band_stats(dataset, "train")
    stacks = {}
    for split in ("train", "val", "test"):
        images, _ = _load_split_arrays(dataset, dataset.records(split), stats,
                                       template_run.required_bands)
        t0 = time.perf_counter()
        stacks[split] = _extract_stack(images, template_run, backbone, codec, schedule, context)
        say(f"  {split}: {images.shape[0]} images in {time.perf_counter() - t0:.1f}s")

    rows: list[dict] = []

    def record(row_kind, timestep, kind, strategy, seed, report):
        rows.append({
            "row_kind": row_kind, "timestep": timestep, "module_kind": kind,
            "strategy": strategy, "seed": seed,
            "metric": report.primary_metric(),
            "miou": report.final.get("miou"), "accuracy": report.final.get("accuracy"),
            "f1_micro": report.final.get("f1_micro"), "f1_macro": report.final.get("f1_macro"),
            "best_epoch": report.best_epoch})

    for cell in raw_cells:
        plan = ExtractionPlan((cell["timestep"],), ((_kind(cell["kind"]), None),), scales)
        run = make_run(plan, "concat", cell["seed"])
        t0 = time.perf_counter()
        _, report = train_probe(run, stacks=stacks)
        say(f"raw t={cell['timestep']} kind={cell['kind']} seed={cell['seed']}: "
            f"{report.primary_metric():.4f} ({time.perf_counter() - t0:.1f}s)")
        record("raw", cell["timestep"], cell["kind"], "concat", cell["seed"], report)

    base_plan = ExtractionPlan(tuple(base_timesteps),
                               tuple((_kind(k), None) for k in kinds), scales)
    for base in baselines:
        run = make_run(base_plan, base["strategy"], base["seed"])
        t0 = time.perf_counter()
        _, report = train_probe(run, stacks=stacks)
        say(f"baseline {base['strategy']} seed={base['seed']}: "
            f"{report.primary_metric():.4f} ({time.perf_counter() - t0:.1f}s)")
        record("baseline", None, "all", base["strategy"], base["seed"], report)

    csv_path = out_dir / "ablation.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)

    _plot(rows, kinds, out_dir)
    report_path = out_dir / "ablation.json"
    report_path.write_text(json.dumps({"config": cfg, "rows": rows}, indent=2,
                                      sort_keys=True, default=str))
    return {"rows": rows, "csv": str(csv_path), "report": str(report_path)}


def _plot(rows: list[dict], kinds: list[str], out_dir: Path) -> None:
    for kind in kinds:
        cells = [r for r in rows if r["row_kind"] == "raw" and r["module_kind"] == kind]
        if not cells:
            continue
        timesteps = sorted({r["timestep"] for r in cells})
        medians = [float(np.median([r["metric"] for r in cells if r["timestep"] == t]))
                   for t in timesteps]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(timesteps, medians, marker="o")
        ax.set_xlabel("timestep")
        ax.set_ylabel("metric")
        ax.set_title(f"raw {kind} probes")
        fig.tight_layout()
        fig.savefig(out_dir / f"timesteps_{kind}.png", dpi=110)
        plt.close(fig)
