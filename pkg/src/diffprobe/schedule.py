"""Discrete variance schedule driving forward noising and deterministic stepping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TOTAL_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep variances ``betas`` (index 0 holds t=1) and the derived
    ``alphas`` / ``alpha_bars`` running products, all float64.

    ``alpha_bar(0)`` is defined as 1 so a transition to the fully denoised
    state is well-formed.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not ((betas > 0.0) & (betas < 1.0)).all():
            raise ValueError("every beta must lie strictly in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if not ((alpha_bars > 0.0) & (alpha_bars < 1.0)).all():
            raise ValueError("alpha_bars left (0, 1); schedule too aggressive for float64")
        if alpha_bars.size > 1 and not (np.diff(alpha_bars) < 0.0).all():
            raise ValueError("alpha_bars must be strictly decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.flags.writeable = False

    @property
    def total_steps(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at timestep t, with alpha_bar(0) = 1."""
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"timestep {t} outside [0, {self.total_steps}]")
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict:
        return {"kind": "linear" if self._is_linear() else "explicit",
                "total_steps": self.total_steps,
                "beta_start": float(self.betas[0]),
                "beta_end": float(self.betas[-1])}

    def _is_linear(self) -> bool:
        ref = np.linspace(self.betas[0], self.betas[-1], self.betas.size)
        return bool(np.allclose(ref, self.betas, rtol=1e-12, atol=0))


def build_linear_schedule(total_steps: int,
                          beta_start: float = DEFAULT_BETA_START,
                          beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not (0.0 < beta_start < 1.0) or not (0.0 < beta_end < 1.0):
        raise ValueError("beta bounds must lie strictly in (0, 1)")
    if beta_start > beta_end:
        raise ValueError(f"beta_start {beta_start} exceeds beta_end {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, total_steps, dtype=np.float64))


def schedule_from_dict(d: dict) -> NoiseSchedule:
    return build_linear_schedule(int(d["total_steps"]),
                                 float(d["beta_start"]), float(d["beta_end"]))
