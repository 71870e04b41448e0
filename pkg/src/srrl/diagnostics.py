"""Numerical self-checks: gradient oracles, inversion round trip, guidance gap,
advantage contract, and density normalisation.

Each check takes the implementation it exercises as an argument so a
deliberately broken variant can be swapped in (``inject_fault``) to prove
the check actually fails.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import denoiser, rl, sampler
from .denoiser import DenoiserParams, enable_adapters, init_params
from .schedule import make_linear_schedule

FD_STEP = 1e-5
GRAD_RTOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error relative to the max-norm of the reference (absolute if the reference is ~0)."""
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def fd_gradient(f: Callable[[], float], params: DenoiserParams, h: float = FD_STEP) -> dict[str, np.ndarray]:
    """Central finite differences of ``f()`` w.r.t. every trainable tensor of ``params`` (mutated and restored)."""
    out = {}
    for name in params.trainable_names():
        arr = params.tensors[name]
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f()
            arr[idx] = orig - h
            fm = f()
            arr[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def max_grad_error(analytic: dict, numeric: dict) -> float:
    if set(analytic) != set(numeric):
        return float("inf")
    return max(relative_error(analytic[k], numeric[k]) for k in numeric)


def small_net(rng, dim=2, num_classes=3, num_steps=6, hidden=(6, 5), adapters=False) -> DenoiserParams:
    p = init_params(dim, num_classes, num_steps, rng, hidden=hidden, time_embed=4)
    for k in p.tensors:
        if k.startswith("b"):
            p.tensors[k] = rng.normal(0, 0.3, size=p.tensors[k].shape)
    if adapters:
        p = enable_adapters(p, rng, rank=2)
        for k in p.tensors:
            if k.startswith("B"):
                p.tensors[k] = rng.normal(0, 0.3, size=p.tensors[k].shape)
    return p


def check_backprop(rng, n_cases: int = 10, backprop=denoiser.backprop) -> CheckResult:
    worst = 0.0
    for case in range(n_cases):
        p = small_net(rng, adapters=bool(case % 2))
        n = 3
        x = rng.standard_normal((n, p.dim))
        c = rng.integers(-1, p.num_classes, size=n)
        t = rng.integers(1, p.num_steps + 1, size=n)
        u = rng.standard_normal((n, p.dim))
        analytic = backprop(p, x, c, t, u)
        numeric = fd_gradient(lambda: float(np.sum(denoiser.predict_noise(p, x, c, t) * u)), p)
        worst = max(worst, max_grad_error(analytic, numeric))
    return CheckResult("denoiser backprop vs finite differences", worst < GRAD_RTOL, f"max rel err {worst:.2e}")


def random_trajectory(rng, params, schedule, lam=2.0):
    c = int(rng.integers(0, params.num_classes))
    return sampler.sample_round(params, schedule, rng.standard_normal(params.dim), c, lam, 1.0, rng)


def perturbed(params: DenoiserParams, rng, scale: float) -> DenoiserParams:
    q = params.copy()
    for k in q.trainable_names():
        q.tensors[k] = q.tensors[k] + scale * rng.standard_normal(q.tensors[k].shape)
    return q


def check_ppo_gradient(rng, n_cases: int = 10, ppo_gradient=rl.ppo_gradient, clip_eps: float = 0.2) -> CheckResult:
    worst = 0.0
    done = 0
    attempts = 0
    while done < n_cases and attempts < 20 * n_cases:
        attempts += 1
        old = small_net(rng, adapters=bool(done % 2))
        schedule = make_linear_schedule(old.num_steps, 0.05, 0.3)
        traj = random_trajectory(rng, old, schedule)
        new = perturbed(old, rng, 0.02)
        logp, logp_old, _ = rl.step_log_probs(traj, new)
        ratio = np.exp(logp - logp_old)
        # stay clear of the clip kinks, where the objective is not differentiable
        if np.min(np.abs(np.abs(ratio - 1.0) - clip_eps)) < 0.02:
            continue
        adv = float(rng.normal())
        analytic = ppo_gradient(traj, new, adv, clip_eps)
        numeric = fd_gradient(lambda: rl.ppo_objective(traj, new, adv, clip_eps)[0], new)
        worst = max(worst, max_grad_error(analytic, numeric))
        done += 1
    ok = done == n_cases and worst < GRAD_RTOL
    return CheckResult("ppo gradient vs finite differences", ok, f"{done} cases, max rel err {worst:.2e}")


def constant_eps_net(rng, dim=2, num_classes=2, num_steps=10) -> DenoiserParams:
    """A network whose prediction ignores x (input columns for x zeroed)."""
    p = init_params(dim, num_classes, num_steps, rng, hidden=(16, 16))
    p.tensors["W0"][:, :dim] = 0.0
    return p


def check_round_trip(rng, invert_step=sampler.ddim_invert_step, n_inputs: int = 20) -> CheckResult:
    p = constant_eps_net(rng)
    schedule = make_linear_schedule(p.num_steps, 0.02, 0.3)
    lam = 1.5
    x0 = rng.standard_normal((n_inputs, p.dim))
    c = 1
    x = x0
    for t in range(1, schedule.T + 1):
        x = invert_step(p, schedule, x, c, t, lam)
    back = sampler.denoise(p, schedule, x, c, lam)
    err = float(np.max(np.abs(back - x0)))
    return CheckResult("inversion round trip (x-independent eps)", err < 1e-10, f"max abs err {err:.2e}")


def check_guidance_gap_zero(rng) -> CheckResult:
    p = small_net(rng)
    schedule = make_linear_schedule(p.num_steps, 0.02, 0.3)
    x0 = rng.standard_normal(p.dim)
    gap = sampler.guidance_gap_diagnostic(p, schedule, x0, 1, 2.0, 2.0)
    return CheckResult("guidance gap vanishes at equal scales", gap == 0.0, f"delta {gap:.3e}")


def check_advantages(rng, normalize=rl.normalize_advantages, n_groups: int = 200) -> CheckResult:
    worst = 0.0
    for _ in range(n_groups):
        r = rng.normal(size=int(rng.integers(2, 40))) * rng.uniform(0.1, 10.0)
        adv = normalize(r).advantages
        worst = max(worst, abs(float(adv.mean())), abs(float(adv.std()) - 1.0))
    return CheckResult("advantage mean 0 / std 1", worst < 1e-9, f"max deviation {worst:.2e}")


def check_density(rng, log_prob=sampler.gaussian_log_prob) -> CheckResult:
    p = small_net(rng, dim=1, num_classes=2)
    schedule = make_linear_schedule(p.num_steps, 0.05, 0.3)
    t = p.num_steps
    x_t = rng.standard_normal(1)
    sigma = float(sampler.ddim_sigma(schedule, t, 1.0))
    mean, _, _ = sampler.ddim_mean(p, schedule, x_t, 0, t, 2.0, sigma)
    grid = np.linspace(mean[0, 0] - 12 * sigma, mean[0, 0] + 12 * sigma, 20001)
    dens = np.exp(log_prob(grid[:, None], np.broadcast_to(mean, (grid.size, 1)), sigma))
    mass = float(np.trapezoid(dens, grid))
    return CheckResult("step density integrates to one", abs(mass - 1.0) < 1e-3, f"mass {mass:.6f}")


def check_reinforce_consistency(rng, n_cases: int = 5) -> CheckResult:
    worst = 0.0
    for _ in range(n_cases):
        p = small_net(rng)
        schedule = make_linear_schedule(p.num_steps, 0.05, 0.3)
        traj = random_trajectory(rng, p, schedule)
        r = float(rng.normal())
        a = rl.ppo_gradient(traj, p, r, 0.2)
        b = rl.reinforce_gradient(traj, p, r)
        worst = max(worst, max_grad_error(a, b))
    return CheckResult("ppo == reinforce at ratio 1", worst < 1e-12, f"max rel diff {worst:.2e}")


def _faulty_backprop(*args):
    g = denoiser.backprop(*args)
    k = sorted(g)[0]
    g[k] = g[k] * (1.0 + 1e-3)
    return g


def _faulty_invert(params, schedule, x_prev, c, t, lam):
    return sampler.ddim_invert_step(params, schedule, x_prev, c, t, lam) * (1.0 + 1e-9)


def _faulty_normalize(rewards):
    r = np.asarray(rewards, dtype=np.float64)
    return rl.RewardGroup(r, (r - r.mean()) / r.std(ddof=1), False)


def _faulty_ppo_gradient(traj, params, adv, clip_eps):
    return {k: v * 1.01 for k, v in rl.ppo_gradient(traj, params, adv, clip_eps).items()}


def _faulty_log_prob(x, mean, sigma):
    return sampler.gaussian_log_prob(x, mean, sigma) + 0.01


FAULTS = ("backprop", "ppo", "inversion", "advantage", "density")


def run_all(seed: int = 0, inject_fault: str | None = None) -> list[CheckResult]:
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ValueError(f"unknown fault {inject_fault!r}; choose from {FAULTS}")
    rng = np.random.default_rng(seed)
    f = inject_fault
    return [
        check_backprop(rng, backprop=_faulty_backprop if f == "backprop" else denoiser.backprop),
        check_ppo_gradient(rng, ppo_gradient=_faulty_ppo_gradient if f == "ppo" else rl.ppo_gradient),
        check_reinforce_consistency(rng),
        check_round_trip(rng, invert_step=_faulty_invert if f == "inversion" else sampler.ddim_invert_step),
        check_guidance_gap_zero(rng),
        check_advantages(rng, normalize=_faulty_normalize if f == "advantage" else rl.normalize_advantages),
        check_density(rng, log_prob=_faulty_log_prob if f == "density" else sampler.gaussian_log_prob),
    ]
