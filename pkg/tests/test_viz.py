import json

import numpy as np
import pytest

from diffprobe.checkpoint import CheckpointError
from diffprobe.viz import pca_to_rgb, viz_attention, viz_experts, viz_features, viz_weights

RNG = np.random.default_rng(51)


# -- PCA helper ---------------------------------------------------------

def test_pca_constant_map_renders_flat():
    rgb, info = pca_to_rgb(np.full((4, 5, 5), 3.0))
    np.testing.assert_allclose(rgb, 0.5)


def test_pca_identity_covariance_keeps_rank():
    x = RNG.standard_normal((3, 32, 32))
    rgb, info = pca_to_rgb(x)
    assert info["kept_components"] == 3
    eigenvalues = np.asarray(info["eigenvalues"])
    assert (eigenvalues[:3] > 0).all()
    assert info["discarded_energy"] == pytest.approx(0.0, abs=1e-9)


def test_pca_reconstruction_error_equals_discarded_eigenvalues():
    x = RNG.standard_normal((6, 8, 8))
    rgb, info = pca_to_rgb(x)
    flat = x.reshape(6, 64).T.astype(np.float64)
    flat = flat - flat.mean(axis=0, keepdims=True)
    u, s, vt = np.linalg.svd(flat, full_matrices=False)
    xk = (u[:, :3] * s[:3]) @ vt[:3]
    err = np.linalg.norm(flat - xk) ** 2
    assert info["discarded_energy"] == pytest.approx(err, rel=1e-9)
    assert info["discarded_energy"] == pytest.approx(np.sum(s[3:] ** 2), rel=1e-9)


def test_pca_grayscale_fallback_below_three_channels():
    rgb, info = pca_to_rgb(RNG.standard_normal((2, 4, 4)))
    assert info["grayscale_fallback"]
    np.testing.assert_array_equal(rgb[:, :, 0], rgb[:, :, 1])
    np.testing.assert_array_equal(rgb[:, :, 0], rgb[:, :, 2])


# -- weight heatmaps ---------------------------------------------------------

def test_viz_weights_round_trip(trained_probe, tmp_path):
    out = viz_weights(trained_probe["ckpt"], tmp_path)
    from diffprobe.checkpoint import load_checkpoint
    tensors, _ = load_checkpoint(trained_probe["ckpt"])
    weights = tensors["fusion.global.weights"]
    want = np.abs(weights) / np.abs(weights).max()
    exported = np.loadtxt(out["matrix"])
    np.testing.assert_allclose(exported, want, rtol=1e-6)
    assert (tmp_path / "global_weights.png").exists()


def test_viz_weights_uniform_matrix_is_flat(trained_probe, tmp_path):
    from diffprobe.checkpoint import load_checkpoint, save_checkpoint
    tensors, meta = load_checkpoint(trained_probe["ckpt"])
    tensors = dict(tensors)
    tensors["fusion.global.weights"] = np.full_like(tensors["fusion.global.weights"], 0.25)
    meta = {k: v for k, v in meta.items() if k != "checkpoint_format_version"}
    ckpt = save_checkpoint(tmp_path / "uniform.npz", tensors, meta)
    out = viz_weights(ckpt, tmp_path / "viz")
    np.testing.assert_allclose(out["normalized"], 1.0)


def test_viz_weights_rejects_non_global(trained_moe_probe, tmp_path):
    with pytest.raises(CheckpointError, match="no global weight matrix"):
        viz_weights(trained_moe_probe["ckpt"], tmp_path)


# -- fused feature panels ---------------------------------------------------------

def test_viz_features_emits_per_scale_panels(trained_probe, tmp_path):
    out = viz_features(trained_probe["ckpt"], tmp_path, num_images=1)
    assert len(out["panels"]) == 4  # one per scale
    assert (tmp_path / "viz_features.json").exists()


# -- expert panels ---------------------------------------------------------

def test_viz_experts_panel_count_and_recombination(trained_moe_probe, tmp_path):
    out = viz_experts(trained_moe_probe["ckpt"], tmp_path)
    assert len(out["panels"]) == 3 + 1  # experts + fused
    gates = out["gates"]
    recombined = sum(gates[e] * out["expert_outputs"][e] for e in range(3))
    np.testing.assert_allclose(recombined, out["fused"], rtol=1e-5, atol=1e-7)
    assert gates.sum() == pytest.approx(1.0, abs=1e-6)


def test_viz_experts_rejects_non_moe(trained_probe, tmp_path):
    with pytest.raises(CheckpointError, match="not a MoE"):
        viz_experts(trained_probe["ckpt"], tmp_path)


def test_viz_experts_single_expert_equals_fused(tiny_world, tmp_path):
    from conftest import fast_probe_kwargs
    from diffprobe.probe import ProbeRun, train_probe

    run = ProbeRun(**fast_probe_kwargs(tiny_world, strategy="moe", epochs=1,
                                       moe={"num_experts": 1, "top_k": 1}))
    ckpt, _ = train_probe(run, out_dir=tmp_path / "probe")
    out = viz_experts(ckpt, tmp_path / "viz")
    assert len(out["panels"]) == 2
    np.testing.assert_allclose(out["expert_outputs"][0], out["fused"], rtol=1e-6)


# -- attention overlays ---------------------------------------------------------

def test_viz_attention_row_normalized_and_sized(tiny_world, tmp_path):
    out = viz_attention(tiny_world["backbone"], tiny_world["seg"], tmp_path,
                        timestep=5, scale=2, query=(1, 2))
    assert out["row_sum"] == pytest.approx(1.0, abs=1e-5)
    assert out["overlay"].shape == out["image_hw"]
    assert out["attention_grid"].shape == (8, 8)  # latent 16 at scale 2
    meta = json.loads((tmp_path / "viz_attention.json").read_text())
    assert meta["overlay_hw"] == [32, 32]


def test_viz_attention_rejects_out_of_grid_query(tiny_world, tmp_path):
    with pytest.raises(ValueError, match="outside"):
        viz_attention(tiny_world["backbone"], tiny_world["seg"], tmp_path,
                      timestep=5, scale=4, query=(9, 0))
