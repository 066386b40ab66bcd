import csv
import json

import pytest
import yaml

from diffprobe.cli import main


def run_cli(*argv) -> int:
    return main(list(argv))


def strip_wall_clock(d: dict) -> dict:
    return {k: v for k, v in d.items() if k not in ("wall_clock_sec", "created_at")}


@pytest.fixture(scope="module")
def cli_world(tiny_world, tmp_path_factory):
    """Dataset + pretrained-ish backbone + trained probe, all through the CLI."""
    root = tmp_path_factory.mktemp("cli_world")
    data = root / "data"
    code = run_cli("gen-data", "--out", str(data), "--seed", "0",
                   "--set", "task=segmentation", "--set", "num_train=14",
                   "--set", "num_val=5", "--set", "num_test=5",
                   "--set", "image_size=32", "--set", "num_classes=4")
    assert code == 0
    pre = root / "pretrain"
    code = run_cli("pretrain", "--out", str(pre), "--seed", "0",
                   "--set", f"dataset_root={data}",
                   "--set", "steps=3", "--set", "batch_size=4",
                   "--set", "schedule.total_steps=50",
                   "--set", "denoiser.channels_per_scale=[8,12,16,20]",
                   "--set", "denoiser.context_dim=8",
                   "--set", "denoiser.context_tokens=2",
                   "--set", "denoiser.time_embed_dim=16")
    assert code == 0
    train_cfg = {
        "dataset_root": str(data),
        "backbone_path": str(pre / "backbone.npz"),
        "plan": {"timesteps": [1, 5], "kinds": [["resnet", None], ["selfattn", None]],
                 "scales": [1, 2, 3, 4], "half": "decoder"},
        "strategy": "global", "d_out": [8, 8, 8, 8], "fpn_channels": 8,
        "ppm_bins": [1, 2], "epochs": 1, "batch_size": 8, "warmup_epochs": 1,
        "inversion_stride": 2, "seed": 0,
    }
    cfg_path = root / "train.yaml"
    cfg_path.write_text(yaml.safe_dump(train_cfg))
    train_out = root / "train"
    assert run_cli("train", "--config", str(cfg_path), "--out", str(train_out)) == 0
    return {"root": root, "data": data, "backbone": pre / "backbone.npz",
            "train_cfg": cfg_path, "train_out": train_out}


def test_gen_data_writes_manifest_and_run_record(cli_world):
    assert (cli_world["data"] / "manifest.jsonl").exists()
    record = json.loads((cli_world["data"] / "run.json").read_text())
    assert record["command"] == "gen-data"
    assert record["seed"] == 0
    assert record["config"]["num_train"] == 14
    assert "config_checksum" in record and "version" in record


def test_pretrain_emits_checkpoint_and_history(cli_world):
    pre = cli_world["backbone"].parent
    assert cli_world["backbone"].exists()
    history = json.loads((pre / "loss_history.json").read_text())
    assert history["steps"] == 3 and len(history["loss"]) == 3


def test_train_outputs(cli_world):
    out = cli_world["train_out"]
    assert (out / "probe.npz").exists()
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["final"]["miou"] is not None
    record = json.loads((out / "run.json").read_text())
    assert record["command"] == "train"


def test_eval_command(cli_world, tmp_path):
    out = tmp_path / "eval"
    code = run_cli("eval", "--out", str(out),
                   "--set", f"checkpoint={cli_world['train_out'] / 'probe.npz'}",
                   "--set", "split=val")
    assert code == 0
    metrics = json.loads((out / "eval_metrics.json").read_text())
    assert metrics["final"]["miou"] is not None


def test_extract_command_dumps_stacks(cli_world, tmp_path):
    out = tmp_path / "features"
    code = run_cli("extract", "--out", str(out),
                   "--set", f"dataset_root={cli_world['data']}",
                   "--set", f"backbone_path={cli_world['backbone']}",
                   "--set", "splits=[val]", "--set", "inversion_stride=2",
                   "--set", "plan.timesteps=[1,5]",
                   "--set", "plan.kinds=[[resnet,null]]",
                   "--set", "plan.scales=[1,2]")
    assert code == 0
    from diffprobe.features import load_stack
    stack = load_stack(out / "features_val.npz")
    assert len(stack) == 4  # 2 timesteps x 1 kind x 2 scales
    assert stack.batch_size == 5


def test_train_determinism_across_reruns(cli_world, tmp_path):
    outs = []
    for sub in ("r1", "r2"):
        out = tmp_path / sub
        assert run_cli("train", "--config", str(cli_world["train_cfg"]),
                       "--out", str(out)) == 0
        outs.append(strip_wall_clock(json.loads((out / "metrics.json").read_text())))
    assert outs[0] == outs[1]


def test_viz_weights_command(cli_world, tmp_path):
    out = tmp_path / "w"
    code = run_cli("viz-weights", "--out", str(out),
                   "--set", f"checkpoint={cli_world['train_out'] / 'probe.npz'}")
    assert code == 0
    assert (out / "global_weights.png").exists()
    assert (out / "global_weights.txt").exists()


def test_viz_attention_command(cli_world, tmp_path):
    out = tmp_path / "attn"
    code = run_cli("viz-attention", "--out", str(out),
                   "--set", f"backbone_path={cli_world['backbone']}",
                   "--set", f"dataset_root={cli_world['data']}",
                   "--set", "timestep=5", "--set", "scale=1", "--set", "query=[0,1]")
    assert code == 0
    assert json.loads((out / "viz_attention.json").read_text())["row_sum"] == pytest.approx(1.0, abs=1e-5)


def test_ablate_command_grid_and_idempotence(cli_world, tmp_path):
    cfg = {
        "dataset_root": str(cli_world["data"]),
        "backbone_path": str(cli_world["backbone"]),
        "raw_timesteps": [1, 5], "kinds": ["resnet"],
        "baseline_timesteps": [1, 5], "strategies": ["concat", "global"],
        "seeds": [0], "inversion_stride": 2,
        "probe": {"epochs": 1, "batch_size": 8, "warmup_epochs": 1,
                  "d_out": [8, 8, 8, 8], "fpn_channels": 8, "ppm_bins": [1, 2]},
    }
    cfg_path = tmp_path / "ablate.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert run_cli("ablate", "--config", str(cfg_path), "--out", str(out)) == 0
        with (out / "ablation.csv").open() as fh:
            outs.append(list(csv.DictReader(fh)))
    rows = outs[0]
    # |timesteps| x |kinds| + |baselines|
    assert len(rows) == 2 * 1 + 2
    assert outs[0] == outs[1]
    assert (tmp_path / "a" / "timesteps_resnet.png").exists()


def test_exit_code_config_errors(tmp_path):
    assert run_cli("gen-data", "--out", str(tmp_path), "--set", "task=mystery") == 1
    assert run_cli("train", "--out", str(tmp_path)) == 1          # missing keys
    assert run_cli("gen-data", "--out", str(tmp_path), "--device", "gpu") == 1
    assert run_cli("eval", "--config", str(tmp_path / "missing.yaml")) == 1
    assert run_cli("gen-data", "--out", str(tmp_path), "--set", "noequals") == 1


def test_exit_code_runtime_failure(tmp_path):
    code = run_cli("eval", "--out", str(tmp_path),
                   "--set", f"checkpoint={tmp_path / 'missing.npz'}")
    assert code == 2


def test_gen_data_idempotent_rerun(tmp_path):
    import hashlib
    args = ("gen-data", "--out", str(tmp_path / "d"), "--seed", "3",
            "--set", "num_train=4", "--set", "num_val=2", "--set", "num_test=2",
            "--set", "image_size=16", "--set", "num_classes=3")
    assert run_cli(*args) == 0
    first = {p.relative_to(tmp_path / "d"): hashlib.sha256(p.read_bytes()).hexdigest()
             for p in sorted((tmp_path / "d").rglob("*.png"))}
    assert run_cli(*args) == 0
    second = {p.relative_to(tmp_path / "d"): hashlib.sha256(p.read_bytes()).hexdigest()
              for p in sorted((tmp_path / "d").rglob("*.png"))}
    assert first == second
