"""Command line entry points: pretrain | train | sample | eval | diagnose.

Exit codes: 0 success, 1 usage/config/checkpoint error, 2 failed numerical check.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import diagnostics
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import generate_dataset
from .denoiser import init_params, pretrain
from .reflect import METRICS_COLUMNS, evaluate_rounds, reflect_trace, train
from .report import CsvStream, round_color, scatter_svg, write_csv, write_svg
from .rl import evaluate_reward

log = logging.getLogger("srrl")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="srrl", description="Self-reflective RL for a toy conditional diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="experiment config (.cfg)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override output_dir")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("pretrain", help="train the base denoiser on the toy dataset")
    common(p)
    p = sub.add_parser("train", help="SRRL fine-tuning; pretrains first unless --checkpoint is given")
    common(p)
    p.add_argument("--checkpoint", help="pretrained checkpoint (.json)")
    p = sub.add_parser("sample", help="multi-round reflective sampling with CSV + SVG output")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint to sample from (default: <out>/trained.json)")
    p = sub.add_parser("eval", help="mean reward per reflection round")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint to evaluate (default: <out>/trained.json)")
    p = sub.add_parser("diagnose", help="run the numerical self-checks")
    common(p, needs_config=False)
    p.add_argument("--inject-fault", choices=diagnostics.FAULTS, default=None, help="break one check on purpose")
    return parser


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.command}.resolved.cfg").write_text(cfg.to_text(), encoding="utf-8")
    return cfg, out


def _provenance(cfg: ExperimentConfig, stage: str, rounds: int = 0) -> dict:
    return {"config_hash": cfg.digest(), "seed": cfg.seed, "rounds_completed": rounds, "stage": stage}


def run_pretrain(cfg: ExperimentConfig, out: Path):
    rng = np.random.default_rng(cfg.seed)
    x0, cond = generate_dataset(cfg, rng)
    schedule = cfg.make_schedule()
    params = init_params(
        cfg.data.dim, cfg.data.num_classes, cfg.train.T, rng, hidden=cfg.model.hidden, time_embed=cfg.model.time_embed
    )
    t0 = time.perf_counter()
    p = cfg.pretrain
    losses = pretrain(
        params, x0, cond, schedule, rng, p.steps, p.batch_size, p.cond_dropout, lr=p.lr, weight_decay=p.weight_decay
    )
    log.info("pretrained %d steps in %.1fs, final loss %.4f", p.steps, time.perf_counter() - t0, np.mean(losses[-50:]))
    write_csv(out / "pretrain_loss.csv", ("step", "loss"), ({"step": i, "loss": v} for i, v in enumerate(losses)))
    save_checkpoint(out / "pretrained.json", params, schedule, _provenance(cfg, "pretrain"))
    return params, schedule


def _load_compatible(path, cfg: ExperimentConfig):
    params, schedule, prov = load_checkpoint(path)
    if params.dim != cfg.data.dim or params.num_classes != cfg.data.num_classes:
        raise CheckpointError(f"{path}: network dimensions do not match the config")
    if schedule.T != cfg.train.T:
        raise CheckpointError(f"{path}: checkpoint has T={schedule.T}, config has T={cfg.train.T}")
    return params, schedule, prov


def run_train(cfg: ExperimentConfig, out: Path, checkpoint: str | None = None):
    if checkpoint:
        pretrained, schedule, _ = _load_compatible(checkpoint, cfg)
    else:
        pretrained, schedule = run_pretrain(cfg, out)
    tc = cfg.train_config()
    with CsvStream(out / "metrics.csv", METRICS_COLUMNS) as stream:
        params, rows = train(tc, pretrained, on_metrics=stream.write)
    skipped = sum(r["skipped"] for r in rows)
    log.info("trained %d iterations (%d skipped)", len(rows), skipped)
    save_checkpoint(out / "trained.json", params, schedule, _provenance(cfg, "train", tc.K))
    return params, rows


def _checkpoint_for(args, out: Path) -> str:
    path = args.checkpoint or str(out / "trained.json")
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return path


def run_sample(cfg: ExperimentConfig, out: Path, checkpoint: str):
    params, schedule, _ = _load_compatible(checkpoint, cfg)
    oracle = cfg.oracle()
    guidance = cfg.guidance_config()
    rng = np.random.default_rng(cfg.seed)
    K = cfg.sample.rounds
    per_round: list[list] = [[] for _ in range(K + 1)]
    rows = []
    for c in cfg.conditions:
        x_T = rng.standard_normal((cfg.sample.n_samples, params.dim))
        for k, x0 in enumerate(reflect_trace(params, schedule, c, K, guidance, x_T)):
            rewards = np.atleast_1d(evaluate_reward(oracle, x0, c))
            per_round[k].append((x0, np.full(len(x0), c)))
            for i, (x, r) in enumerate(zip(x0, rewards)):
                row = {"round": k, "condition": c, "index": i, "reward": float(r)}
                row.update({f"x{j}": float(v) for j, v in enumerate(x)})
                rows.append(row)
    cols = ("round", "condition", "index", *[f"x{j}" for j in range(params.dim)], "reward")
    write_csv(out / "samples.csv", cols, rows)
    line = None
    if cfg.task == "relational" and (cfg.reward.index_a, cfg.reward.index_b) == (0, 1):
        line = (1.0, -cfg.reward.margin)
    # one frame for every round so the plots line up
    extent = max(4.0, float(np.ceil(max(np.max(np.abs(p[:, :2])) for chunks in per_round for p, _ in chunks))))
    summary = []
    for k, chunks in enumerate(per_round):
        pts = np.concatenate([p for p, _ in chunks])
        conds = np.concatenate([c for _, c in chunks])
        svg = scatter_svg(pts, conds, round_color(k, K + 1), title=f"reflection round {k}", extent=extent, line=line)
        write_svg(out / f"samples_round_{k}.svg", svg)
        mean_r = float(np.mean([r["reward"] for r in rows if r["round"] == k]))
        summary.append({"round": k, "mean_reward": mean_r})
    write_csv(out / "samples_summary.csv", ("round", "mean_reward"), summary)
    return summary


def run_eval(cfg: ExperimentConfig, out: Path, checkpoint: str):
    params, schedule, _ = _load_compatible(checkpoint, cfg)
    means = evaluate_rounds(
        params,
        schedule,
        cfg.conditions,
        cfg.eval.rounds,
        cfg.guidance_config(),
        cfg.oracle(),
        cfg.eval.n_samples,
        np.random.default_rng(cfg.seed),
    )
    write_csv(out / "eval_rounds.csv", ("round", "mean_reward"), ({"round": k, "mean_reward": m} for k, m in enumerate(means)))
    return means


def run_diagnose(seed: int, inject_fault: str | None) -> int:
    results = diagnostics.run_all(seed, inject_fault)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name}: {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        if args.command == "diagnose":
            if args.config:
                load_config(args.config)
            return run_diagnose(args.seed if args.seed is not None else 0, args.inject_fault)
        cfg, out = _resolve(args)
        if args.command == "pretrain":
            run_pretrain(cfg, out)
        elif args.command == "train":
            run_train(cfg, out, args.checkpoint)
        elif args.command == "sample":
            for row in run_sample(cfg, out, _checkpoint_for(args, out)):
                print(f"round {row['round']}: mean reward {row['mean_reward']:.4f}")
        elif args.command == "eval":
            for k, m in enumerate(run_eval(cfg, out, _checkpoint_for(args, out))):
                print(f"round {k}: mean reward {m:.4f}")
    except (ConfigError, CheckpointError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
