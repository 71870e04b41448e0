"""Rewards, group-normalised advantages and clipped policy-gradient objectives.

The reward arrives once, at the terminal sample, so each trajectory's
advantage is constant across its timesteps.  Only stochastic steps
(sigma > 0) carry a density and enter the objectives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from .denoiser import Condition, DenoiserParams
from .sampler import RoundTrajectory, cfg_backprop, ddim_mean, gaussian_log_prob


@dataclass(frozen=True)
class RewardOracle:
    """Analytic reward r(x0, c).

    ``mode_affinity``: log density of the condition's isotropic Gaussian
    mixture (weights normalised, per-mode std ``mode_std``).
    ``relational_constraint``: ``sigmoid(sharpness * (x[a] - x[b] - margin))``,
    independent of the condition.
    """

    kind: str
    targets: dict = field(default_factory=dict)  # class id -> list of (mean, weight)
    mode_std: float = 1.0
    index_a: int = 0
    index_b: int = 1
    margin: float = 0.0
    sharpness: float = 1.0

    def __post_init__(self):
        if self.kind == "mode_affinity":
            for cid, modes in self.targets.items():
                if not modes:
                    raise ValueError(f"condition {cid} has no modes")
                for _, w in modes:
                    if not (np.isfinite(w) and w > 0):
                        raise ValueError(f"mode weights must be positive and finite, got {w}")
            if not self.mode_std > 0:
                raise ValueError("mode_std must be positive")
        elif self.kind == "relational_constraint":
            if not self.sharpness > 0:
                raise ValueError("sharpness must be positive")
        elif self.kind != "constant":
            raise ValueError(f"unknown reward kind {self.kind!r}")

    @classmethod
    def mode_affinity(cls, targets: dict, mode_std: float = 1.0) -> "RewardOracle":
        return cls("mode_affinity", targets={int(k): list(v) for k, v in targets.items()}, mode_std=mode_std)

    @classmethod
    def relational(cls, index_a=0, index_b=1, margin=0.0, sharpness=1.0) -> "RewardOracle":
        return cls("relational_constraint", index_a=index_a, index_b=index_b, margin=margin, sharpness=sharpness)

    @classmethod
    def constant(cls, value: float = 0.0) -> "RewardOracle":
        # every group is degenerate under a constant reward
        return cls("constant", margin=value)


def evaluate_reward(oracle: RewardOracle, x, c) -> float | np.ndarray:
    """Reward for one state (returns float) or a batch sharing condition ``c``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if oracle.kind == "relational_constraint":
        d = xb.shape[1]
        if max(oracle.index_a, oracle.index_b) >= d:
            raise ValueError(f"constraint indices exceed state dimension {d}")
        r = expit(oracle.sharpness * (xb[:, oracle.index_a] - xb[:, oracle.index_b] - oracle.margin))
    elif oracle.kind == "mode_affinity":
        cid = c.class_id if isinstance(c, Condition) else c
        if cid not in oracle.targets:
            raise KeyError(f"no reward targets registered for condition {cid}")
        modes = oracle.targets[cid]
        means = np.array([np.asarray(m, dtype=np.float64) for m, _ in modes])
        if means.shape[1] != xb.shape[1]:
            raise ValueError("mode dimension does not match state dimension")
        w = np.array([w for _, w in modes], dtype=np.float64)
        d = xb.shape[1]
        s2 = oracle.mode_std**2
        sq = np.sum((xb[:, None, :] - means[None, :, :]) ** 2, axis=2)
        comp = -0.5 * sq / s2 - 0.5 * d * np.log(2 * np.pi * s2) + np.log(w / w.sum())
        r = logsumexp(comp, axis=1)
    else:
        r = np.full(xb.shape[0], oracle.margin)
    return float(r[0]) if single else r


@dataclass(frozen=True)
class RewardGroup:
    rewards: np.ndarray
    advantages: np.ndarray
    degenerate: bool


def normalize_advantages(rewards, std_floor: float = 1e-8) -> RewardGroup:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need a group of at least two rewards")
    std = r.std()  # population std
    if std < std_floor:
        return RewardGroup(r, np.zeros_like(r), True)
    return RewardGroup(r, (r - r.mean()) / std, False)


def contrastive_select(group: RewardGroup) -> tuple[int, int] | None:
    """Indices of the max- and min-reward members (lowest index wins ties), or None if degenerate."""
    if group.degenerate:
        return None
    return int(np.argmax(group.rewards)), int(np.argmin(group.rewards))


def clipped_surrogate(ratio, advantage, clip_eps: float):
    """Per-step ``min(ratio*A, clip(ratio)*A)`` and a mask of steps where the clipped term binds."""
    ratio = np.asarray(ratio, dtype=np.float64)
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage
    return np.minimum(unclipped, clipped), clipped < unclipped


def _stochastic_arrays(traj: RoundTrajectory):
    steps = traj.stochastic_steps()
    if not steps:
        raise ValueError("trajectory has no stochastic steps")
    if any(s.log_prob_old is None for s in steps):
        raise ValueError("stochastic step without a recorded log density")
    t = np.array([s.t for s in steps])
    x_t = np.array([s.state_before for s in steps])
    x_prev = np.array([s.state_after for s in steps])
    sigma = np.array([s.sigma for s in steps])
    logp_old = np.array([s.log_prob_old for s in steps])
    return t, x_t, x_prev, sigma, logp_old


def step_log_probs(traj: RoundTrajectory, params: DenoiserParams):
    """log p_params(x_{t-1} | x_t, c) at every stochastic step, plus what its gradient needs."""
    t, x_t, x_prev, sigma, logp_old = _stochastic_arrays(traj)
    c = traj.condition.id
    mean, eps_coef, _ = ddim_mean(params, traj.schedule, x_t, c, t, traj.guidance_scale, sigma)
    logp = gaussian_log_prob(x_prev, mean, sigma)
    # d logp / d eps for each step
    dlogp_deps = eps_coef * (x_prev - mean) / sigma[:, None] ** 2
    return logp, logp_old, (t, x_t, c, dlogp_deps)


def _weighted_grad(params, traj, ctx, weights) -> dict[str, np.ndarray]:
    t, x_t, c, dlogp_deps = ctx
    return cfg_backprop(params, x_t, c, t, traj.guidance_scale, weights[:, None] * dlogp_deps)


def ppo_objective(traj: RoundTrajectory, params_new: DenoiserParams, advantage: float, clip_eps: float = 0.2):
    """Clipped surrogate summed over stochastic steps, and the fraction of steps where clipping binds."""
    if not 0.0 < clip_eps < 1.0:
        raise ValueError("clip_eps must lie in (0, 1)")
    logp, logp_old, _ = step_log_probs(traj, params_new)
    vals, binding = clipped_surrogate(np.exp(logp - logp_old), advantage, clip_eps)
    return float(vals.sum()), float(binding.mean())


def ppo_gradient(traj: RoundTrajectory, params_new: DenoiserParams, advantage: float, clip_eps: float = 0.2):
    """Exact gradient of ``ppo_objective``; binding clipped steps contribute nothing."""
    if not 0.0 < clip_eps < 1.0:
        raise ValueError("clip_eps must lie in (0, 1)")
    logp, logp_old, ctx = step_log_probs(traj, params_new)
    ratio = np.exp(logp - logp_old)
    _, binding = clipped_surrogate(ratio, advantage, clip_eps)
    weights = np.where(binding, 0.0, advantage * ratio)
    return _weighted_grad(params_new, traj, ctx, weights)


def reinforce_gradient(traj: RoundTrajectory, params: DenoiserParams, reward: float):
    """Score-function gradient: sum_t grad log p(x_{t-1} | x_t, c) * reward."""
    _, _, ctx = step_log_probs(traj, params)
    return _weighted_grad(params, traj, ctx, np.full(len(ctx[0]), float(reward)))
