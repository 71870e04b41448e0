"""Variance schedule and closed-form forward-process quantities.

Timesteps run ``t = 1..T``.  ``alpha_bar(0) == 1`` so denoising down to
``t = 0`` yields a clean sample.  Arrays are stored 1-indexed through the
accessor methods; the raw ``betas``/``alphas``/``alpha_bars`` arrays are
0-indexed with entry ``i`` holding timestep ``i + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    # alpha_bar_table[t] for t = 0..T, with alpha_bar_table[0] = 1
    alpha_bar_table: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return self.num_steps

    def alpha_bar(self, t):
        """alpha_bar at timestep ``t`` (scalar or int array), with alpha_bar(0) = 1."""
        return self.alpha_bar_table[np.asarray(t)]

    def alpha(self, t):
        return self.alphas[np.asarray(t) - 1]

    def beta(self, t):
        return self.betas[np.asarray(t) - 1]

    def check_timestep(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.num_steps):
            raise ValueError(f"timestep out of range [1, {self.num_steps}]: {t}")


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    table = np.concatenate(([1.0], alpha_bars))
    for arr in (betas, alphas, alpha_bars, table):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alphas, alpha_bars, table)


def q_sample(schedule: NoiseSchedule, x0, t: int, noise) -> np.ndarray:
    """Closed-form marginal x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    ``t`` may be a scalar or an integer array broadcasting against the
    leading axis of a batched ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match noise shape {noise.shape}")
    schedule.check_timestep(t)
    abar = schedule.alpha_bar(t)
    if np.ndim(abar) == 1 and x0.ndim == 2:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise
