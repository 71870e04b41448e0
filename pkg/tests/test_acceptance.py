"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line that is printed in the terminal
summary (and immediately with ``pytest -s``).

Recalibrate the end-to-end margin with ``python tests/test_acceptance.py``.
"""

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from srrl import cli, diagnostics
from srrl.config import load_config
from srrl.denoiser import init_params, time_embedding
from srrl.diagnostics import check_backprop, check_ppo_gradient, check_round_trip
from srrl.reflect import train
from srrl.rl import RewardOracle, contrastive_select, evaluate_reward, normalize_advantages, reinforce_gradient
from srrl.sampler import guidance_gap_diagnostic, sample_rounds
from srrl.schedule import make_linear_schedule

from conftest import ACCEPTANCE_LINES, DATA, ROOT, median_round_trip_error, probe_inputs

CALIBRATION = DATA / "calibration.json"


def report(number, name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


# 1. gradient oracle


def test_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    bp = check_backprop(rng, n_cases=10)
    ppo = check_ppo_gradient(rng, n_cases=10)
    secs = time.perf_counter() - start
    report(1, "analytic vs finite-difference gradients, 20 cases", bp.passed and ppo.passed and secs < 30,
           f"backprop {bp.detail}; ppo {ppo.detail}; {secs:.1f}s")


# 2. policy-gradient unbiasedness


class LinearInstance:
    """d=1, T=2, eta=1 chain with a linear guided denoiser and a Gaussian log-density reward.

    With eps(x, t) = a x + e_t the first step gives x_1 ~ N(B, A^2 + sigma^2) and the
    deterministic last step x_0 = C x_1 + D, so the expected reward is closed form.
    """

    lam = 3.0
    mode, mode_std = 0.7, 0.8

    def __init__(self, seed):
        rng = np.random.default_rng(seed)
        self.schedule = make_linear_schedule(2, 0.5, 0.5)
        self.params = init_params(1, 1, 2, rng, hidden=(), time_embed=4)
        self.params.tensors["W0"] = rng.normal(0, 0.3, size=self.params.tensors["W0"].shape)
        self.params.tensors["b0"] = rng.normal(0, 0.3, size=1)
        self.oracle = RewardOracle.mode_affinity({0: [([self.mode], 1.0)]}, self.mode_std)
        # a direction that moves eps at t=2 only: time columns orthogonal to the t=1 embedding
        e1 = time_embedding(1, 2, 4)
        v = rng.standard_normal(4)
        v -= (v @ e1) / (e1 @ e1) * e1
        self.direction = {"W0": np.zeros((1, 6)), "b0": np.zeros(1)}
        self.direction["W0"][0, 1:5] = v / np.linalg.norm(v)

    def expected_reward(self, tensors):
        W, b = tensors["W0"][0], tensors["b0"][0]
        a = W[0]

        def offset(t):
            return W[1:5] @ time_embedding(t, 2, 4) + b + (1 + self.lam) * W[5]

        ab1, ab2 = 0.5, 0.25
        sig = np.sqrt((1 - ab1) / (1 - ab2)) * np.sqrt(1 - ab2 / ab1)
        k2 = np.sqrt(1 - ab1 - sig**2) - np.sqrt(ab1 * (1 - ab2) / ab2)
        A, B = np.sqrt(ab1 / ab2) + k2 * a, k2 * offset(2)
        C, D = (1 - np.sqrt(1 - ab1) * a) / np.sqrt(ab1), -np.sqrt(1 - ab1) * offset(1) / np.sqrt(ab1)
        m, v = C * B + D, C**2 * (A**2 + sig**2)
        s2 = self.mode_std**2
        return -0.5 * np.log(2 * np.pi * s2) - ((m - self.mode) ** 2 + v) / (2 * s2)

    def fd_directional(self, h=1e-5):
        plus = {k: self.params.tensors[k] + h * self.direction[k] for k in self.direction}
        minus = {k: self.params.tensors[k] - h * self.direction[k] for k in self.direction}
        return (self.expected_reward(plus) - self.expected_reward(minus)) / (2 * h)

    def mc_directional(self, n, seed):
        rng = np.random.default_rng(seed)
        trajs = sample_rounds(
            self.params, self.schedule, rng.standard_normal((n, 1)), 0, self.lam, 1.0, rng.standard_normal((2, n, 1))
        )
        rewards = self.oracle_reward(np.array([tr.terminal for tr in trajs]))
        proj = np.empty(n)
        for i, (tr, r) in enumerate(zip(trajs, rewards)):
            g = reinforce_gradient(tr, self.params, float(r))
            proj[i] = sum(float(np.sum(g[k] * self.direction[k])) for k in self.direction)
        return proj

    def oracle_reward(self, x0):
        return evaluate_reward(self.oracle, x0, 0)


def test_closed_form_expected_reward_matches_sampling():
    """Sanity check of the oracle itself against plain Monte Carlo."""
    inst = LinearInstance(0)
    rng = np.random.default_rng(5)
    n = 200_000
    trajs = sample_rounds(
        inst.params, inst.schedule, rng.standard_normal((n, 1)), 0, inst.lam, 1.0, rng.standard_normal((2, n, 1))
    )
    r = inst.oracle_reward(np.array([t.terminal for t in trajs]))
    assert abs(r.mean() - inst.expected_reward(inst.params.tensors)) < 4 * r.std() / np.sqrt(n)


def test_policy_gradient_unbiasedness():
    start = time.perf_counter()
    n = 100_000
    details, ok = [], True
    for seed in range(3):
        inst = LinearInstance(seed)
        proj = inst.mc_directional(n, seed + 100)
        se = proj.std(ddof=1) / np.sqrt(n)
        z = (proj.mean() - inst.fd_directional()) / se
        ok &= abs(z) < 3
        details.append(f"seed {seed}: z={z:+.2f}")
    secs = time.perf_counter() - start
    report(2, "REINFORCE Monte-Carlo mean vs finite-difference expected reward", ok and secs < 120,
           f"{'; '.join(details)}; {secs:.0f}s")


# 3. inversion round trip


def test_inversion_round_trip(pinned):
    start = time.perf_counter()
    exact = check_round_trip(np.random.default_rng(3), n_inputs=100)
    params, _ = pinned
    x0 = probe_inputs()
    e10, e50 = median_round_trip_error(params, 10, x0), median_round_trip_error(params, 50, x0)
    secs = time.perf_counter() - start
    report(3, "inversion round trip", exact.passed and e50 < e10 and secs < 60,
           f"constant eps {exact.detail}; trained median rel err T=10 {e10:.4f}, T=50 {e50:.4f}; {secs:.1f}s")


# 4. guidance-gap monotonicity

GAPS = (0.0, 0.5, 1.0, 2.0)


def test_guidance_gap_monotonicity(pinned):
    params, schedule = pinned
    x0 = probe_inputs()
    deltas = np.array([guidance_gap_diagnostic(params, schedule, x0, 0, 3.0 - g, 3.0) for g in GAPS])
    single = deltas[:, 0]
    mean = deltas.mean(axis=1)
    zero_exact = bool(np.all(deltas[0] == 0.0))
    per_input = int(np.sum(np.all(np.diff(deltas, axis=0) >= 0, axis=0)))
    ok = zero_exact and np.all(np.diff(single) >= 0) and np.all(np.diff(mean) >= 0)
    report(4, "guidance gap non-decreasing on the pinned checkpoint", ok,
           f"pinned input delta {np.array2string(single, precision=5)}; mean over {len(x0)} inputs "
           f"{np.array2string(mean, precision=5)}; zero at zero gap: {zero_exact}; "
           f"monotone for {per_input}/{len(x0)} individual inputs")


# 5. advantages


def test_advantage_properties():
    rng = np.random.default_rng(55)
    worst_contract = worst_affine = 0.0
    selections_kept = True
    for _ in range(1000):
        r = rng.normal(size=int(rng.integers(2, 64))) * rng.uniform(0.01, 100) + rng.normal(0, 10)
        g = normalize_advantages(r)
        worst_contract = max(worst_contract, abs(g.advantages.mean()), abs(g.advantages.std() - 1))
        a, b = rng.uniform(0.01, 100), rng.normal(0, 100)
        h = normalize_advantages(a * r + b)
        worst_affine = max(worst_affine, float(np.max(np.abs(h.advantages - g.advantages))))
        selections_kept &= contrastive_select(h) == contrastive_select(g)
    ok = worst_contract < 1e-9 and worst_affine < 1e-9 and selections_kept
    report(5, "advantage contract and affine invariance, 1000 groups", ok,
           f"contract dev {worst_contract:.1e}; affine dev {worst_affine:.1e}; selections unchanged: {selections_kept}")


# 6. end-to-end trend


def end_to_end(seed, out: Path, config=ROOT / "configs" / "relational.cfg"):
    """Pretrain, train and evaluate through the CLI code paths; returns (per-round means, timings)."""
    cfg = load_config(config)
    cfg.seed = seed
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    cli.run_pretrain(cfg, out)
    t1 = time.perf_counter()
    cli.run_train(cfg, out, str(out / "pretrained.json"))
    t2 = time.perf_counter()
    means = cli.run_eval(cfg, out, str(out / "trained.json"))
    return np.asarray(means), (t1 - t0, t2 - t0)


def test_end_to_end_trend(tmp_path):
    margin = json.loads(CALIBRATION.read_text())["margin"]
    rhos, gains, pre_secs, total_secs = [], [], 0.0, 0.0
    for seed in range(5):
        means, (pre, total) = end_to_end(seed, tmp_path / f"seed{seed}")
        rhos.append(spearmanr(np.arange(len(means)), means)[0])
        gains.append(means[-1] - means[0])
        pre_secs, total_secs = max(pre_secs, pre), max(total_secs, total)
    ok = np.mean(rhos) > 0 and min(rhos) > -0.1 and np.mean(gains) > margin and pre_secs < 120 and total_secs < 900
    report(6, "reward improves with reflection round, 5 seeds", ok,
           f"rho {np.round(rhos, 3).tolist()} (mean {np.mean(rhos):.3f}); final minus round 0 "
           f"{np.round(gains, 3).tolist()} (mean {np.mean(gains):.3f}, margin {margin}); "
           f"slowest pretrain {pre_secs:.1f}s, slowest pretrain+train {total_secs:.1f}s")


# 7. degenerate safety


def test_degenerate_safety(capsys):
    cfg = load_config(ROOT / "configs" / "relational.cfg")
    cfg.reward.kind = "constant"
    cfg.train.K, cfg.train.E, cfg.train.G = 3, 2, 8
    rng = np.random.default_rng(0)
    base = init_params(2, 2, cfg.train.T, rng)
    tc = cfg.train_config()
    tc.use_adapters = False
    out, rows = train(tc, base)
    unchanged = all(np.array_equal(out.tensors[k], base.tensors[k]) for k in base.tensors)
    all_skipped = all(r["skipped"] == 1 for r in rows) and len(rows) == 6
    healthy = cli.main(["diagnose"])
    faulty = {f: cli.main(["diagnose", "--inject-fault", f]) for f in diagnostics.FAULTS}
    capsys.readouterr()
    ok = unchanged and all_skipped and healthy == 0 and all(code == 2 for code in faulty.values())
    report(7, "constant reward is a no-op; diagnose flags faults", ok,
           f"params unchanged: {unchanged}; {sum(r['skipped'] for r in rows)}/{len(rows)} skipped; "
           f"diagnose healthy exit {healthy}; fault exits {faulty}")


def calibrate(seeds=range(5)):
    """One calibration pass; the pinned margin is half the smallest observed gain."""
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        for seed in seeds:
            means, _ = end_to_end(seed, Path(tmp) / f"seed{seed}")
            rows.append({"seed": seed, "means": [round(float(m), 6) for m in means],
                         "rho": float(spearmanr(np.arange(len(means)), means)[0]),
                         "gain": float(means[-1] - means[0])})
    margin = float(np.floor(50 * min(r["gain"] for r in rows)) / 100)
    record = {"config": "configs/relational.cfg", "rule": "margin = half the smallest per-seed gain, floored to 0.01",
              "margin": margin, "runs": rows}
    CALIBRATION.write_text(json.dumps(record, indent=1) + "\n")
    return record


if __name__ == "__main__":
    rec = calibrate()
    json.dump(rec, sys.stdout, indent=1)
