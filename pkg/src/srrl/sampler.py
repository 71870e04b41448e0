"""Trajectory mechanics: guided noise, DDIM denoising/inversion, guidance gap.

Guidance uses ``eps_c + lam * (eps_c - eps_null)``, so ``lam = 0`` is purely
conditional.  DDIM steps with ``sigma_t > 0`` carry a Gaussian log density;
deterministic steps record ``None`` instead.  Because ``alpha_bar(0) = 1``
the final step (t = 1) is always deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import NULL_ID, Condition, DenoiserParams, backprop, condition_ids, predict_noise
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class GuidanceConfig:
    lambda_denoise: float = 3.0
    lambda_forward: float = 0.5
    lambda_inference: float = 7.5

    def __post_init__(self):
        for name in ("lambda_denoise", "lambda_forward", "lambda_inference"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class TrajectoryStep:
    t: int
    state_before: np.ndarray
    state_after: np.ndarray
    log_prob_old: float | None
    sigma: float

    @property
    def stochastic(self) -> bool:
        return self.sigma > 0


@dataclass(frozen=True)
class RoundTrajectory:
    round_index: int
    steps: tuple[TrajectoryStep, ...]
    terminal: np.ndarray
    condition: Condition
    guidance_scale: float
    schedule: NoiseSchedule = field(repr=False, compare=False)

    @property
    def initial(self) -> np.ndarray:
        return self.steps[0].state_before

    def stochastic_steps(self) -> list[TrajectoryStep]:
        return [s for s in self.steps if s.stochastic]


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _col(v, n):
    """Broadcast a per-row scalar or array to shape (n, 1)."""
    a = np.asarray(v, dtype=np.float64)
    return np.full((n, 1), a) if a.ndim == 0 else a.reshape(n, 1)


def cfg_noise(params: DenoiserParams, x, c, t, lam: float) -> np.ndarray:
    xb, single = _batch(x)
    n = xb.shape[0]
    ids = condition_ids(c, n)
    tt = np.broadcast_to(np.asarray(t), (n,))
    both = predict_noise(
        params,
        np.concatenate([xb, xb]),
        np.concatenate([ids, np.full(n, NULL_ID)]),
        np.concatenate([tt, tt]),
    )
    eps_c, eps_null = both[:n], both[n:]
    lam = _col(lam, n)
    out = eps_c + lam * (eps_c - eps_null)
    return out[0] if single else out


def cfg_backprop(params: DenoiserParams, x, c, t, lam, upstream) -> dict[str, np.ndarray]:
    """Gradient of ``sum(cfg_noise(...) * upstream)`` w.r.t. trainable tensors."""
    xb, _ = _batch(x)
    ub, _ = _batch(upstream)
    n = xb.shape[0]
    ids = condition_ids(c, n)
    tt = np.broadcast_to(np.asarray(t), (n,))
    lam = _col(lam, n)
    return backprop(
        params,
        np.concatenate([xb, xb]),
        np.concatenate([ids, np.full(n, NULL_ID)]),
        np.concatenate([tt, tt]),
        np.concatenate([(1.0 + lam) * ub, -lam * ub]),
    )


def ddim_sigma(schedule: NoiseSchedule, t, eta: float):
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(np.asarray(t) - 1)
    return eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)


def ddim_mean(params: DenoiserParams, schedule: NoiseSchedule, x_t, c, t, lam, sigma):
    """Mean of the DDIM transition and the coefficient multiplying the guided noise in it.

    Returns ``(mean, eps_coef, eps)`` where ``mean = sqrt(ab_prev/ab_t) x_t +
    eps_coef * eps``.  ``t`` and ``sigma`` may be per-row arrays.
    """
    xb, _ = _batch(x_t)
    n = xb.shape[0]
    schedule.check_timestep(t)
    ab_t = _col(schedule.alpha_bar(t), n)
    ab_prev = _col(schedule.alpha_bar(np.asarray(t) - 1), n)
    sig = _col(sigma, n)
    dir_var = 1.0 - ab_prev - sig**2
    if np.any(dir_var < -1e-12):
        raise ValueError("1 - alpha_bar_prev - sigma^2 < 0; eta must lie in [0, 1]")
    dir_coef = np.sqrt(np.maximum(dir_var, 0.0))
    eps = cfg_noise(params, xb, c, t, lam)
    x0_hat = (xb - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    mean = np.sqrt(ab_prev) * x0_hat + dir_coef * eps
    eps_coef = dir_coef - np.sqrt(ab_prev * (1.0 - ab_t) / ab_t)
    return mean, eps_coef, eps


def gaussian_log_prob(x, mean, sigma) -> np.ndarray:
    """Isotropic Gaussian log density, one value per row (sigma per row or scalar)."""
    x, _ = _batch(x)
    mean, _ = _batch(mean)
    d = x.shape[1]
    var = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x.shape[0],)) ** 2
    sq = np.sum((x - mean) ** 2, axis=1)
    return -0.5 * d * np.log(2.0 * np.pi * var) - 0.5 * sq / var


def ddim_step(params, schedule, x_t, c, t: int, lam: float, eta: float, noise=None):
    """One DDIM transition x_t -> x_{t-1}.

    Returns ``(x_prev, log_prob, sigma)``; ``log_prob`` is None when the
    step is deterministic (sigma == 0), a float for a single state, or an
    array for a batch.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    schedule.check_timestep(t)
    xb, single = _batch(x_t)
    sigma = float(ddim_sigma(schedule, t, eta))
    mean, _, _ = ddim_mean(params, schedule, xb, c, t, lam, sigma)
    if sigma > 0:
        if noise is None:
            raise ValueError("a stochastic step (sigma > 0) needs a noise draw")
        nb, _ = _batch(noise)
        if nb.shape != xb.shape:
            raise ValueError(f"noise shape {nb.shape} does not match state shape {xb.shape}")
        x_prev = mean + sigma * nb
        logp = gaussian_log_prob(x_prev, mean, sigma)
        logp = float(logp[0]) if single else logp
    else:
        x_prev = mean
        logp = None
    return (x_prev[0] if single else x_prev), logp, sigma


def denoise(params, schedule, x_T, c, lam: float) -> np.ndarray:
    """Deterministic (eta = 0) DDIM pass from t = T down to 0 without recording."""
    x = np.asarray(x_T, dtype=np.float64)
    for t in range(schedule.T, 0, -1):
        x, _, _ = ddim_step(params, schedule, x, c, t, lam, 0.0)
    return x


def sample_rounds(
    params, schedule, x_T, c, lam: float, eta: float, noises=None, round_index: int = 0
) -> list[RoundTrajectory]:
    """Recorded DDIM pass for a batch of start states.

    ``noises`` has shape (T, n, d) with ``noises[T - t]`` used at timestep t;
    it may be None when ``eta == 0``.
    """
    xb, _ = _batch(x_T)
    if not np.all(np.isfinite(xb)):
        raise ValueError("x_T must be finite")
    n = xb.shape[0]
    ids = condition_ids(c, n)
    if eta > 0 and noises is None:
        raise ValueError("stochastic sampling needs per-step noises")
    states = [xb]
    logps, sigmas = [], []
    for j, t in enumerate(range(schedule.T, 0, -1)):
        nz = None if noises is None else noises[j]
        x_prev, lp, sig = ddim_step(params, schedule, states[-1], ids, t, lam, eta, nz)
        states.append(x_prev)
        logps.append(lp)
        sigmas.append(sig)
    out = []
    for i in range(n):
        steps = tuple(
            TrajectoryStep(
                t=schedule.T - j,
                state_before=states[j][i],
                state_after=states[j + 1][i],
                log_prob_old=None if logps[j] is None else float(logps[j][i]),
                sigma=sigmas[j],
            )
            for j in range(schedule.T)
        )
        cond = Condition(None if ids[i] == NULL_ID else int(ids[i]))
        out.append(RoundTrajectory(round_index, steps, states[-1][i], cond, float(lam), schedule))
    return out


def sample_round(params, schedule, x_T, c, lam: float, eta: float, rng=None, round_index: int = 0):
    x_T = np.asarray(x_T, dtype=np.float64)
    noises = None
    if eta > 0:
        if rng is None:
            raise ValueError("stochastic sampling needs an rng")
        noises = rng.standard_normal((schedule.T, 1, x_T.shape[-1]))
    return sample_rounds(params, schedule, x_T[None, :], c, lam, eta, noises, round_index)[0]


def ddim_invert_step(params, schedule, x_prev, c, t: int, lam: float) -> np.ndarray:
    """Deterministic inverse of the eta = 0 step, reusing eps evaluated at x_{t-1}."""
    schedule.check_timestep(t)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    eps = cfg_noise(params, x_prev, c, t, lam)
    coef = np.sqrt(1.0 - ab_t) - np.sqrt(ab_t * (1.0 - ab_prev) / ab_prev)
    out = np.sqrt(ab_t / ab_prev) * np.asarray(x_prev, dtype=np.float64) + coef * eps
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite inversion state")
    return out


def condition_guided_forward(params, schedule, x0, c, lambda_forward: float) -> np.ndarray:
    x = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    for t in range(1, schedule.T + 1):
        x = ddim_invert_step(params, schedule, x, c, t, lambda_forward)
    return x


def guidance_gap_diagnostic(params, schedule, x0, c, lambda_forward: float, lambda_denoise: float):
    """Squared distance between the inversions of ``x0`` at the two guidance scales."""
    a = condition_guided_forward(params, schedule, x0, c, lambda_forward)
    b = condition_guided_forward(params, schedule, x0, c, lambda_denoise)
    sq = (a - b) ** 2
    return float(np.sum(sq)) if sq.ndim == 1 else np.sum(sq, axis=1)
