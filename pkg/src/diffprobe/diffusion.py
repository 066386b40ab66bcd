"""Forward noising, deterministic stepping/inversion, and denoiser pretraining.

All coefficient arithmetic runs in float64 and is cast to the latent dtype
once, so chained transitions lose no more precision than the latents
themselves carry.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .optim import AdamW
from .schedule import NoiseSchedule


class DivergenceError(RuntimeError):
    pass


def _coef(value: float, dtype) -> np.ndarray | float:
    return np.asarray(value, dtype=dtype)[()]


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Jump straight to the noised latent: sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps.

    ``t`` may be a scalar or a per-sample integer array.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent shape {x0.shape}")
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        ti = int(t_arr)
        if not 1 <= ti <= schedule.total_steps:
            raise ValueError(f"timestep {ti} outside [1, {schedule.total_steps}]")
        ab = schedule.alpha_bar(ti)
        return _coef(np.sqrt(ab), x0.dtype) * x0 + _coef(np.sqrt(1.0 - ab), x0.dtype) * eps
    if t_arr.shape[0] != x0.shape[0]:
        raise ValueError("per-sample timesteps must match the batch size")
    if ((t_arr < 1) | (t_arr > schedule.total_steps)).any():
        raise ValueError(f"timesteps outside [1, {schedule.total_steps}]")
    ab = schedule.alpha_bars[t_arr - 1]
    shape = (-1,) + (1,) * (x0.ndim - 1)
    c1 = np.sqrt(ab).astype(x0.dtype).reshape(shape)
    c2 = np.sqrt(1.0 - ab).astype(x0.dtype).reshape(shape)
    return c1 * x0 + c2 * eps


def _ddim_transition(x: np.ndarray, from_t: int, to_t: int, eps_hat: np.ndarray,
                     schedule: NoiseSchedule) -> np.ndarray:
    """Shared deterministic move between any two timesteps.

    Reconstructs the clean estimate from the current state and re-noises it
    to the destination signal level; direction-agnostic.
    """
    ab_from = schedule.alpha_bar(from_t)
    ab_to = schedule.alpha_bar(to_t)
    dt = x.dtype
    x0_hat = (x - _coef(np.sqrt(1.0 - ab_from), dt) * eps_hat) / _coef(np.sqrt(ab_from), dt)
    return _coef(np.sqrt(ab_to), dt) * x0_hat + _coef(np.sqrt(1.0 - ab_to), dt) * eps_hat


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray,
              schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic denoising move from timestep ``t`` down to ``t_prev``."""
    if not 0 <= t <= schedule.total_steps or not 0 <= t_prev <= schedule.total_steps:
        raise ValueError(f"timesteps {(t_prev, t)} outside [0, {schedule.total_steps}]")
    if t_prev >= t:
        raise ValueError(f"t_prev {t_prev} must be strictly below t {t}")
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ValueError("eps_hat shape must match the latent shape")
    return _ddim_transition(x_t, t, t_prev, eps_hat, schedule)


def _eps_from(denoiser, x: np.ndarray, t: int, context) -> np.ndarray:
    out = denoiser.forward(x, t, context)
    eps = out[0] if isinstance(out, tuple) else out
    return eps.data if isinstance(eps, Tensor) else np.asarray(eps)


def ddim_invert(x0: np.ndarray, target_timesteps, schedule: NoiseSchedule, denoiser,
                context, stride: int = 1) -> dict[int, np.ndarray]:
    """Walk the deterministic update in reversed timestep order from the
    clean latent, returning the state at every requested timestep.

    Visits multiples of ``stride`` plus all targets; the predictor is
    evaluated at the current state with its timestep (clamped to 1 at the
    clean starting point).
    """
    targets = [int(t) for t in target_timesteps]
    if not targets:
        raise ValueError("target timestep list is empty")
    if any(b <= a for a, b in zip(targets, targets[1:])) or len(set(targets)) != len(targets):
        raise ValueError(f"target timesteps must be strictly ascending, got {targets}")
    if targets[0] < 1 or targets[-1] > schedule.total_steps:
        raise ValueError(f"targets outside [1, {schedule.total_steps}]: {targets}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    top = targets[-1]
    points = sorted(set(range(0, top + 1, stride)) | set(targets) | {0, top})
    x = np.asarray(x0)
    out: dict[int, np.ndarray] = {}
    with no_grad():
        for cur, nxt in zip(points, points[1:]):
            eps = _eps_from(denoiser, x, max(cur, 1), context)
            x = _ddim_transition(x, cur, nxt, eps, schedule)
            if nxt in targets:
                out[nxt] = x
    return out


def ddim_denoise(x_t: np.ndarray, visited_timesteps, schedule: NoiseSchedule, denoiser,
                 context) -> np.ndarray:
    """Iterate the deterministic update back down a visited-timestep list
    (ascending, as produced by inversion) until the clean state."""
    points = sorted(set(int(t) for t in visited_timesteps) | {0})
    x = np.asarray(x_t)
    with no_grad():
        for cur, nxt in zip(reversed(points), list(reversed(points))[1:]):
            eps = _eps_from(denoiser, x, max(cur, 1), context)
            x = ddim_step(x, cur, nxt, eps, schedule)
    return x


def pretrain_denoiser(images: np.ndarray, codec, schedule: NoiseSchedule, denoiser,
                      context, steps: int, seed: int, batch_size: int = 8,
                      lr: float = 2e-3, weight_decay: float = 0.0,
                      log_every: int = 50, on_log=None) -> list[float]:
    """Noise-prediction pretraining: minimize the squared error between the
    sampled noise and the network's prediction at uniformly drawn timesteps.

    Returns the per-step loss history. The denoiser is updated in place;
    freezing for downstream use is the caller's choice.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.shape[0] == 0:
        raise ValueError("pretraining dataset is empty")
    latents = codec.encode(images).astype(np.float32)
    rng = np.random.default_rng(seed)
    optimizer = AdamW(denoiser.parameters(), lr=lr, weight_decay=weight_decay)
    history: list[float] = []
    n = latents.shape[0]
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        x0 = latents[idx]
        t = rng.integers(1, schedule.total_steps + 1, size=x0.shape[0])
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        x_t = forward_noise(x0, t, eps, schedule)
        eps_hat, _ = denoiser.forward(x_t, t, context)
        loss = ag.tensor_mean((eps_hat - Tensor(eps)) ** 2.0)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(
                f"non-finite pretraining loss {value} at step {step}; "
                f"last finite loss: {history[-1] if history else 'none'}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(value)
        if on_log is not None and (step % log_every == 0 or step == steps - 1):
            on_log(step, value)
    return history
