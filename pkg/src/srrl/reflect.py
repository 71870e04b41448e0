"""Reflection chains, the SRRL training loop, and multi-round inference.

A reflection chain alternates a DDIM denoising pass with a condition-guided
inversion back to x_T.  Context rounds are deterministic (eta = 0); only the
last round of a training chain is sampled stochastically and recorded with
densities, and only that round's segment is optimised.

Randomness: every sample in a group draws from its own child generator
(``rng.spawn``), first ``x_T`` then the (T, d) step noises, so results do not
depend on how a group is batched or split across workers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .denoiser import Condition, DenoiserParams, adam_update, enable_adapters, make_optimizer
from .rl import (
    RewardOracle,
    contrastive_select,
    evaluate_reward,
    normalize_advantages,
    ppo_gradient,
    ppo_objective,
)
from .sampler import (
    GuidanceConfig,
    RoundTrajectory,
    condition_guided_forward,
    denoise,
    sample_rounds,
)
from .schedule import NoiseSchedule, make_linear_schedule

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "round",
    "epoch",
    "mean_reward",
    "std_reward",
    "max_reward",
    "min_reward",
    "objective",
    "clip_fraction",
    "skipped",
)


@dataclass
class ReflectionChain:
    rounds: list[RoundTrajectory]
    renoise_inputs: list[np.ndarray]
    condition: Condition

    @property
    def terminal(self) -> np.ndarray:
        return self.rounds[-1].terminal

    def check_contiguity(self) -> None:
        if len(self.renoise_inputs) != len(self.rounds) - 1:
            raise AssertionError("one inversion output expected between consecutive rounds")
        for k, x in enumerate(self.renoise_inputs):
            if not np.array_equal(self.rounds[k + 1].initial, x):
                raise AssertionError(f"round {k + 1} does not start at the inversion of round {k}")
        if any(r.condition != self.condition for r in self.rounds):
            raise AssertionError("rounds of one chain must share the condition")


@dataclass
class TrainConfig:
    K: int = 10
    T: int = 20
    G: int = 32
    E: int = 2
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    eta_final_round: float = 1.0
    clip_eps: float = 0.2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    beta_start: float = 1e-4
    beta_end: float = 0.02
    use_adapters: bool = True
    adapter_rank: int = 4
    seed: int = 0
    conditions: tuple[int, ...] = (0,)
    oracle: RewardOracle = field(default_factory=lambda: RewardOracle.relational())

    def __post_init__(self):
        if self.K < 1 or self.G < 2 or self.E < 1 or self.T < 2:
            raise ValueError(f"need K >= 1, G >= 2, E >= 1, T >= 2 (got K={self.K}, G={self.G}, E={self.E}, T={self.T})")
        if not self.conditions:
            raise ValueError("at least one training condition is required")
        if not 0.0 <= self.eta_final_round <= 1.0:
            raise ValueError("eta_final_round must lie in [0, 1]")

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


def _draw(streams: Sequence[np.random.Generator], T: int, d: int, stochastic: bool):
    x_T = np.empty((len(streams), d))
    noises = np.empty((T, len(streams), d)) if stochastic else None
    for i, g in enumerate(streams):
        x_T[i] = g.standard_normal(d)
        if stochastic:
            noises[:, i, :] = g.standard_normal((T, d))
    return x_T, noises


def build_chains(
    params: DenoiserParams,
    schedule: NoiseSchedule,
    c,
    k: int,
    guidance: GuidanceConfig,
    eta_final: float,
    streams: Sequence[np.random.Generator],
) -> list[ReflectionChain]:
    """Build one chain of depth ``k`` per generator in ``streams``."""
    if k < 0:
        raise ValueError("reflection depth k must be non-negative")
    cond = c if isinstance(c, Condition) else Condition(c)
    x, noises = _draw(streams, schedule.T, params.dim, eta_final > 0)
    per_round: list[list[RoundTrajectory]] = []
    renoise: list[np.ndarray] = []
    for r in range(k):
        rounds = sample_rounds(params, schedule, x, cond, guidance.lambda_denoise, 0.0, round_index=r)
        per_round.append(rounds)
        x0 = np.array([rt.terminal for rt in rounds])
        x = condition_guided_forward(params, schedule, x0, cond, guidance.lambda_forward)
        renoise.append(x)
    per_round.append(
        sample_rounds(params, schedule, x, cond, guidance.lambda_denoise, eta_final, noises, round_index=k)
    )
    chains = []
    for i in range(len(streams)):
        chain = ReflectionChain([rs[i] for rs in per_round], [xr[i] for xr in renoise], cond)
        chain.check_contiguity()
        chains.append(chain)
    return chains


def build_chain(params, schedule, c, k, guidance, eta_final, rng) -> ReflectionChain:
    return build_chains(params, schedule, c, k, guidance, eta_final, [rng])[0]


def _sum_grads(a: dict, b: dict, scale: float) -> dict:
    return {name: scale * (a[name] + b[name]) for name in a}


def train(
    config: TrainConfig,
    pretrained: DenoiserParams,
    on_metrics: Callable[[dict], None] | None = None,
) -> tuple[DenoiserParams, list[dict]]:
    """Run the round-by-round SRRL curriculum and return (params, metrics rows).

    For each depth k = 0..K-1 and epoch e = 0..E-1 a fresh group of G chains
    is sampled under the current parameters for one randomly chosen
    condition.  The max- and min-reward chains' final rounds drive one Adam
    step on the clipped surrogate.  Degenerate groups skip the update.
    """
    if pretrained.num_steps != config.T:
        raise ValueError(f"network was built for T={pretrained.num_steps}, config has T={config.T}")
    schedule = config.schedule()
    rng = np.random.default_rng(config.seed)
    params = pretrained.copy()
    if config.use_adapters and not params.adapter_enabled:
        params = enable_adapters(params, rng, rank=config.adapter_rank)
    opt = make_optimizer(
        params,
        lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        weight_decay=config.weight_decay,
        eps=config.adam_eps,
    )
    rows = []
    for k in range(config.K):
        for e in range(config.E):
            c = int(rng.choice(config.conditions))
            chains = build_chains(
                params, schedule, c, k, config.guidance, config.eta_final_round, rng.spawn(config.G)
            )
            terminals = np.array([ch.terminal for ch in chains])
            rewards = np.asarray(evaluate_reward(config.oracle, terminals, c), dtype=np.float64)
            group = normalize_advantages(rewards)
            picked = contrastive_select(group)
            row = {
                "round": k,
                "epoch": e,
                "mean_reward": float(rewards.mean()),
                "std_reward": float(rewards.std()),
                "max_reward": float(rewards.max()),
                "min_reward": float(rewards.min()),
                "objective": 0.0,
                "clip_fraction": 0.0,
                "skipped": 0,
            }
            if picked is None:
                row["skipped"] = 1
                log.info("round %d epoch %d: degenerate reward group, update skipped", k, e)
            else:
                i_max, i_min = picked
                sel = [(chains[i].rounds[-1], float(group.advantages[i])) for i in (i_max, i_min)]
                grads = [ppo_gradient(traj, params, adv, config.clip_eps) for traj, adv in sel]
                # ascent on the surrogate averaged over the selected pair
                adam_update(params, opt, _sum_grads(grads[0], grads[1], -1.0 / len(sel)))
                objs = [ppo_objective(traj, params, adv, config.clip_eps) for traj, adv in sel]
                row["objective"] = float(np.mean([o for o, _ in objs]))
                row["clip_fraction"] = float(np.mean([f for _, f in objs]))
            rows.append(row)
            if on_metrics is not None:
                on_metrics(row)
    return params, rows


def reflect_trace(params, schedule, c, k: int, guidance: GuidanceConfig, x_T) -> list[np.ndarray]:
    """Deterministic inference chain; returns the samples x_0^0 .. x_0^k."""
    if k < 0:
        raise ValueError("reflection depth k must be non-negative")
    x = np.asarray(x_T, dtype=np.float64)
    outs = []
    for r in range(k + 1):
        x0 = denoise(params, schedule, x, c, guidance.lambda_inference)
        outs.append(x0)
        if r < k:
            x = condition_guided_forward(params, schedule, x0, c, guidance.lambda_forward)
    return outs


def reflect_sample(params, schedule, c, k: int, guidance: GuidanceConfig, x_T) -> np.ndarray:
    return reflect_trace(params, schedule, c, k, guidance, x_T)[-1]


def evaluate_rounds(
    params: DenoiserParams,
    schedule: NoiseSchedule,
    conditions: Sequence[int],
    K: int,
    guidance: GuidanceConfig,
    oracle: RewardOracle,
    n_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Mean oracle reward of the round-k inference sample for k = 0..K.

    Each condition gets ``n_samples`` fresh start noises; every round is
    evaluated on the same noises.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    totals = np.zeros(K + 1)
    count = 0
    for c in conditions:
        x_T = rng.standard_normal((n_samples, params.dim))
        for k, x0 in enumerate(reflect_trace(params, schedule, c, K, guidance, x_T)):
            totals[k] += np.sum(evaluate_reward(oracle, x0, c))
        count += n_samples
    return totals / count
