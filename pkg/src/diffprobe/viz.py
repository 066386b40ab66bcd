"""Inspection tooling: weight heatmaps, PCA feature panels, expert panels,
attention overlays. All outputs are static image files plus json metadata."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

from .autograd import no_grad  # noqa: E402
from .checkpoint import CheckpointError, load_checkpoint  # noqa: E402
from .data import load_folder_dataset  # noqa: E402
from .denoiser import load_backbone  # noqa: E402
from .diffusion import ddim_invert  # noqa: E402
from .features import DECODER, ModuleKind, TapSpec  # noqa: E402
from .fusion import MoEFusion, _topk_mask  # noqa: E402
from .probe import _load_split_arrays, _pyramid_for, rebuild_probe  # noqa: E402
from .transforms import compute_band_stats  # noqa: E402


def pca_to_rgb(feature_map: np.ndarray) -> tuple[np.ndarray, dict]:
    """Project (C, H, W) onto its top principal components over pixels.

    Returns an (H, W, 3) image in [0, 1] plus the eigen-spectrum details.
    With fewer than 3 channels the first component renders as grayscale.
    """
    c, h, w = feature_map.shape
    x = feature_map.reshape(c, h * w).T.astype(np.float64)
    x = x - x.mean(axis=0, keepdims=True)
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    eigenvalues = s ** 2
    k = min(3, c)
    comps = (u[:, :k] * s[:k]).reshape(h, w, k)
    info = {"eigenvalues": eigenvalues.tolist(),
            "kept_components": k,
            "discarded_energy": float(eigenvalues[k:].sum())}
    if k < 3:
        mono = comps[:, :, 0]
        comps = np.repeat(mono[:, :, None], 3, axis=2)
        info["grayscale_fallback"] = True
    rgb = np.empty((h, w, 3))
    for i in range(3):
        ch = comps[:, :, i]
        span = ch.max() - ch.min()
        rgb[:, :, i] = 0.5 if span == 0 else (ch - ch.min()) / span
    return rgb, info


def _save_panel(arr: np.ndarray, title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    ax.imshow(arr)
    ax.set_title(title, fontsize=9)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def viz_weights(ckpt_path, out_dir) -> dict:
    """Heatmap + plain-text export of the learned global fusion weights."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors, meta = load_checkpoint(ckpt_path)
    name = "fusion.global.weights"
    if meta.get("strategy") != "global" or name not in tensors:
        raise CheckpointError(
            f"checkpoint strategy {meta.get('strategy')!r} carries no global weight matrix")
    weights = tensors[name]
    peak = np.abs(weights).max()
    normalized = np.abs(weights) / (peak if peak > 0 else 1.0)
    timesteps = meta.get("run", {}).get("plan", {}).get("timesteps",
                                                        list(range(weights.shape[1])))
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * weights.shape[1], 1.2 + 0.6 * weights.shape[0]))
    im = ax.imshow(normalized, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(weights.shape[1]), [str(t) for t in timesteps])
    ax.set_yticks(range(weights.shape[0]), [f"f{i}" for i in range(weights.shape[0])])
    ax.set_xlabel("timestep")
    ax.set_ylabel("feature block")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    heatmap_path = out_dir / "global_weights.png"
    fig.savefig(heatmap_path, dpi=110)
    plt.close(fig)
    txt_path = out_dir / "global_weights.txt"
    np.savetxt(txt_path, normalized, header=f"timesteps: {list(timesteps)}")
    return {"heatmap": str(heatmap_path), "matrix": str(txt_path),
            "normalized": normalized}


def viz_features(ckpt_path, out_dir, split: str = "test", num_images: int = 1) -> dict:
    """PCA-to-RGB panels of the fused maps, one panel per scale per image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run, fusion, head, meta, assets = rebuild_probe(ckpt_path)
    dataset, backbone, schedule, context, codec, stats = assets
    records = dataset.records(split)[:num_images]
    if not records:
        raise ValueError(f"split {split!r} is empty")
    images, _ = _load_split_arrays(dataset, records, stats, run.required_bands)
    from .probe import _extract_stack
    stack = _extract_stack(images, run, backbone, codec, schedule, context)
    with no_grad():
        pyramid = _pyramid_for(run.strategy, fusion, stack)
    outputs = {"panels": [], "pca": {}}
    for i in range(len(records)):
        for s in pyramid.scales:
            rgb, info = pca_to_rgb(pyramid[s].data[i])
            path = out_dir / f"fused_{run.strategy}_img{i}_scale{s}.png"
            _save_panel(rgb, f"{run.strategy} scale {s}", path)
            outputs["panels"].append(str(path))
            outputs["pca"][f"img{i}_scale{s}"] = info
    (out_dir / "viz_features.json").write_text(json.dumps(
        {"strategy": run.strategy, "pca": outputs["pca"]}, indent=2))
    return outputs


def viz_experts(ckpt_path, out_dir, split: str = "test", scale: int | None = None) -> dict:
    """Dense per-expert panels plus the routed fusion, single timestep group."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run, fusion, head, meta, assets = rebuild_probe(ckpt_path)
    if not isinstance(fusion, MoEFusion):
        raise CheckpointError(f"checkpoint strategy {run.strategy!r} is not a MoE probe")
    dataset, backbone, schedule, context, codec, stats = assets
    records = dataset.records(split)[:1]
    if not records:
        raise ValueError(f"split {split!r} is empty")
    images, _ = _load_split_arrays(dataset, records, stats, run.required_bands)
    from .features import group_by_scale
    from .probe import _extract_stack
    stack = _extract_stack(images, run, backbone, codec, schedule, context)
    groups = group_by_scale(stack)
    scale = scale or min(groups)
    cfg = fusion.config
    with no_grad():
        x_ts = fusion.concat_timestep(scale, groups[scale], 0)
        dense = [e.data[0] for e in fusion.expert_outputs(scale, x_ts)]
        gates = fusion.banks[scale].gate_values(x_ts).data
        mask = _topk_mask(gates, cfg.top_k, axis=1)
        kept = gates * mask
        renorm = (kept / kept.sum(axis=1, keepdims=True))[0]
        fused = sum(renorm[e] * dense[e] for e in range(cfg.num_experts))
    panels = []
    for e, arr in enumerate(dense):
        rgb, _ = pca_to_rgb(arr)
        path = out_dir / f"expert{e}_scale{scale}.png"
        _save_panel(rgb, f"expert {e}", path)
        panels.append(str(path))
    rgb, _ = pca_to_rgb(fused)
    fused_path = out_dir / f"fused_scale{scale}.png"
    _save_panel(rgb, "fused", fused_path)
    panels.append(str(fused_path))
    gate_list = renorm.tolist() if renorm.ndim == 1 else None
    (out_dir / "viz_experts.json").write_text(json.dumps(
        {"scale": scale, "num_experts": cfg.num_experts, "gates": gate_list}, indent=2))
    return {"panels": panels, "expert_outputs": dense, "fused": fused, "gates": renorm}


def viz_attention(backbone_path, dataset_root, out_dir, timestep: int, scale: int,
                  query: tuple[int, int] = (0, 0), split: str = "test") -> dict:
    """Overlay one query pixel's self-attention row on the source image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone, schedule, context, codec, _ = load_backbone(backbone_path)
    dataset = load_folder_dataset(dataset_root)
    stats = compute_band_stats(dataset, "train")
    records = dataset.records(split)[:1]
    if not records:
        raise ValueError(f"split {split!r} is empty")
    images, _ = _load_split_arrays(dataset, records, stats, ("red", "green", "blue"))
    h_s, w_s = backbone.scale_hw(scale)
    qy, qx = query
    if not (0 <= qy < h_s and 0 <= qx < w_s):
        raise ValueError(f"query pixel {query} outside the {h_s}x{w_s} grid at scale {scale}")
    z0 = codec.encode(images)
    states = ddim_invert(z0, [timestep], schedule, backbone, context)
    probe_tap = TapSpec(scale, DECODER, ModuleKind.SELF_ATTENTION, 0)
    with no_grad():
        _, captured = backbone.forward(states[timestep], timestep, context,
                                       capture_attention=probe_tap)
    weights = captured["attention"].data  # (B, heads, N, N)
    row = weights[0].mean(axis=0)[qy * w_s + qx]
    row_sum = float(row.sum())
    grid = row.reshape(h_s, w_s)
    img_h, img_w = images.shape[2], images.shape[3]
    from . import backend
    heat = backend.bilinear_resize(grid[None, None].astype(np.float64), img_h, img_w)[0, 0]
    base = images[0].transpose(1, 2, 0)
    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    ax.imshow(np.clip(base, 0, 1))
    ax.imshow(heat, cmap="inferno", alpha=0.55)
    ax.scatter([qx * img_w / w_s], [qy * img_h / h_s], marker="+", c="cyan", s=80)
    ax.axis("off")
    fig.tight_layout()
    path = out_dir / f"attention_t{timestep}_s{scale}_q{qy}-{qx}.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    (out_dir / "viz_attention.json").write_text(json.dumps(
        {"timestep": timestep, "scale": scale, "query": [qy, qx],
         "row_sum": row_sum, "overlay_hw": [img_h, img_w]}, indent=2))
    return {"path": str(path), "attention_grid": grid, "overlay": heat,
            "row_sum": row_sum, "image_hw": (img_h, img_w)}
