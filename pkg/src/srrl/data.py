"""Toy datasets: per-condition Gaussian mixtures, or a broad Gaussian whose
structure lives only in the reward."""

from __future__ import annotations

import numpy as np

from .config import ConfigError, ExperimentConfig


def generate_dataset(config: ExperimentConfig, rng: np.random.Generator | None = None):
    """Return ``(x0, cond)`` arrays of shapes (n, d) and (n,)."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    d = config.data
    if d.num_classes < 1:
        raise ConfigError("data.num_classes must be >= 1")
    cond = rng.integers(0, d.num_classes, size=d.size)
    if config.task == "relational":
        return d.scale * rng.standard_normal((d.size, d.dim)), cond
    if config.task != "modes":
        raise ConfigError(f"unknown task {config.task!r}")
    x = np.empty((d.size, d.dim))
    for cid in range(d.num_classes):
        idx = np.nonzero(cond == cid)[0]
        means = np.array([m for m, _ in d.modes[cid]], dtype=np.float64)
        w = np.array([w for _, w in d.modes[cid]], dtype=np.float64)
        pick = rng.choice(len(w), size=len(idx), p=w / w.sum())
        x[idx] = means[pick] + d.mode_std * rng.standard_normal((len(idx), d.dim))
    return x, cond
