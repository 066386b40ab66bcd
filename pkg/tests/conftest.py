import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory):
    """Small but complete artifact set: datasets, a saved backbone, a plan.

    The backbone is untrained (mechanics, not quality, is under test here).
    """
    from diffprobe.codec import PatchifyCodec
    from diffprobe.data import (SyntheticSpec, generate_shapes_classification,
                                generate_shapes_segmentation)
    from diffprobe.denoiser import (ConditioningContext, DenoiserConfig, UNetDenoiser,
                                    save_backbone)
    from diffprobe.features import ExtractionPlan, ModuleKind
    from diffprobe.schedule import build_linear_schedule

    root = tmp_path_factory.mktemp("tiny_world")
    spec = SyntheticSpec(num_train=16, num_val=6, num_test=6, image_size=32,
                         num_classes=4, seed=0)
    generate_shapes_segmentation(spec, root / "seg")
    generate_shapes_classification(spec, root / "cls")
    generate_shapes_classification(spec, root / "multi", multi_label=True)

    cfg = DenoiserConfig(num_scales=4, channels_per_scale=(16, 24, 32, 40),
                         latent_channels=12, latent_height=16, latent_width=16,
                         context_dim=16, context_tokens=2, time_embed_dim=32)
    model = UNetDenoiser(cfg, seed=0)
    context = ConditioningContext.create(2, 16, seed=1)
    schedule = build_linear_schedule(100, 1e-3, 0.02)
    codec = PatchifyCodec()
    backbone_path = save_backbone(root / "backbone.npz", model, schedule, context, codec,
                                  seed=0, training_steps=0)
    plan = ExtractionPlan((1, 10), ((ModuleKind.RESNET, None),
                                    (ModuleKind.SELF_ATTENTION, None)), (1, 2, 3, 4))
    return {"root": root, "seg": root / "seg", "cls": root / "cls",
            "multi": root / "multi", "backbone": backbone_path, "plan": plan,
            "denoiser_config": cfg}


def fast_probe_kwargs(world, dataset_key="seg", **overrides):
    base = dict(dataset_root=str(world[dataset_key]), backbone_path=str(world["backbone"]),
                plan=world["plan"], strategy="global", d_out=(12, 12, 12, 12),
                fpn_channels=12, ppm_bins=(1, 2), epochs=2, batch_size=8, seed=0,
                warmup_epochs=1, inversion_stride=2, moe={})
    base.update(overrides)
    return base


@pytest.fixture(scope="session")
def trained_probe(tiny_world, tmp_path_factory):
    """One trained global-strategy segmentation probe with its checkpoint."""
    from diffprobe.probe import ProbeRun, train_probe

    out = tmp_path_factory.mktemp("probe_global")
    run = ProbeRun(**fast_probe_kwargs(tiny_world))
    ckpt, report = train_probe(run, out_dir=out)
    return {"ckpt": ckpt, "report": report, "out": out, "run": run}


@pytest.fixture(scope="session")
def trained_moe_probe(tiny_world, tmp_path_factory):
    from diffprobe.probe import ProbeRun, train_probe

    out = tmp_path_factory.mktemp("probe_moe")
    run = ProbeRun(**fast_probe_kwargs(tiny_world, strategy="moe",
                                       moe={"num_experts": 3, "top_k": 2}))
    ckpt, report = train_probe(run, out_dir=out)
    return {"ckpt": ckpt, "report": report, "out": out, "run": run}
