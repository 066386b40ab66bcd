"""Benchmark the numba kernel path against the pure-numpy fallback.

Run as ``python -m diffprobe.bench``. Times the hot kernels in isolation
and one full denoiser training step end to end, on both backends, and
checks that the two paths agree numerically.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from . import backend


def _time(fn, repeats: int) -> float:
    fn()  # warm (JIT, page faults)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def kernel_cases(rng):
    x = rng.standard_normal((8, 64, 32, 32)).astype(np.float32)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gcols = rng.standard_normal((8, 64 * 9, 1024)).astype(np.float32)
    small = rng.standard_normal((8, 32, 16, 16)).astype(np.float32)
    gy = rng.standard_normal((8, 32, 48, 48)).astype(np.float32)
    return {
        "im2col 3x3 (8,64,32,32)": lambda: backend.im2col(xp, 3, 3, 1, 32, 32),
        "col2im 3x3 (8,64,32,32)": lambda: backend.col2im(gcols, 64, 34, 34, 3, 3, 1, 32, 32),
        "bilinear up 16->48": lambda: backend.bilinear_resize(small, 48, 48),
        "bilinear grad 48->16": lambda: backend.bilinear_resize_grad(gy, 16, 16),
    }


def denoiser_step_case(seed: int = 0):
    from .codec import PatchifyCodec
    from .denoiser import ConditioningContext, DenoiserConfig, UNetDenoiser
    from .diffusion import pretrain_denoiser
    from .schedule import build_linear_schedule

    cfg = DenoiserConfig(latent_height=16, latent_width=16, channels_per_scale=(16, 24, 32, 40),
                         context_dim=16, context_tokens=2, time_embed_dim=32)
    model = UNetDenoiser(cfg, seed=seed)
    ctx = ConditioningContext.create(2, 16, seed=seed + 1)
    sched = build_linear_schedule(100, 1e-3, 0.02)
    codec = PatchifyCodec()
    images = np.random.default_rng(seed).random((8, 3, 32, 32)).astype(np.float32)

    def step():
        pretrain_denoiser(images, codec, sched, model, ctx, steps=1, seed=0, batch_size=8)

    return step


def parity_check(rng) -> float:
    """Worst relative disagreement between the two paths on the hot kernels."""
    x = rng.standard_normal((2, 5, 12, 12)).astype(np.float64)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    g = rng.standard_normal((2, 45, 144)).astype(np.float64)
    worst = 0.0
    results = {}
    for name in ("numpy", "numba"):
        backend.set_backend(name)
        results[name] = (backend.im2col(xp, 3, 3, 1, 12, 12).copy(),
                         backend.col2im(g, 5, 14, 14, 3, 3, 1, 12, 12),
                         backend.bilinear_resize(x, 20, 20),
                         backend.bilinear_resize_grad(x, 20, 20))
    for a, b in zip(results["numpy"], results["numba"]):
        denom = max(np.abs(a).max(), 1e-12)
        worst = max(worst, float(np.abs(a - b).max() / denom))
    return worst


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=10)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)

    available = ["numpy"]
    try:
        backend.set_backend("numba")
        available.insert(0, "numba")
    except Exception:
        print("numba unavailable; benchmarking the numpy path only")

    timings: dict[str, dict[str, float]] = {}
    for name in available:
        backend.set_backend(name)
        timings[name] = {}
        for case, fn in kernel_cases(rng).items():
            timings[name][case] = _time(fn, args.repeats)
        timings[name]["denoiser train step (B=8)"] = _time(denoiser_step_case(), max(2, args.repeats // 3))

    width = max(len(k) for k in next(iter(timings.values())))
    header = f"{'kernel':<{width}}" + "".join(f"{n:>12}" for n in available)
    if len(available) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for case in next(iter(timings.values())):
        line = f"{case:<{width}}"
        for name in available:
            line += f"{timings[name][case] * 1e3:>10.2f}ms"
        if len(available) == 2:
            line += f"{timings['numpy'][case] / timings['numba'][case]:>9.2f}x"
        print(line)

    if len(available) == 2:
        worst = parity_check(rng)
        print(f"\nbackend parity: worst relative difference {worst:.2e}")
        if worst > 1e-6:
            print("PARITY FAILURE: paths disagree beyond 1e-6")
            return 2
    backend.set_backend(available[0])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
