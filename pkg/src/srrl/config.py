"""Experiment configuration: flat ``key = value`` text with dotted section keys.

Example::

    task = relational
    seed = 3
    train.K = 10
    guidance.lambda_forward = 0.5
    data.modes.0 = [[3.0, 0.0, 1.0], [-3.0, 0.0, 2.0]]   # [mean..., weight] per mode

Values are parsed as JSON where possible (numbers, booleans, lists) and as
bare strings otherwise.  ``#`` starts a comment.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .reflect import TrainConfig
from .rl import RewardOracle
from .sampler import GuidanceConfig
from .schedule import NoiseSchedule, make_linear_schedule

TASKS = ("modes", "relational")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    dim: int = 2
    num_classes: int = 2
    size: int = 8192
    mode_std: float = 0.5
    scale: float = 1.0
    # class id -> list of (mean, weight)
    modes: dict = field(default_factory=dict)


@dataclass
class RewardSection:
    kind: str = "auto"  # auto | constant
    index_a: int = 0
    index_b: int = 1
    margin: float = 2.0
    sharpness: float = 2.0
    mode_std: float = 1.0
    constant: float = 0.0


@dataclass
class ModelSection:
    hidden: list = field(default_factory=lambda: [64, 64])
    time_embed: int = 8
    use_adapters: bool = True
    adapter_rank: int = 4


@dataclass
class ScheduleSection:
    beta_start: float = 0.01
    beta_end: float = 0.4


@dataclass
class PretrainSection:
    steps: int = 3000
    batch_size: int = 256
    lr: float = 1e-3
    cond_dropout: float = 0.1
    weight_decay: float = 1e-4


@dataclass
class TrainSection:
    K: int = 10
    T: int = 20
    G: int = 32
    E: int = 2
    eta_final_round: float = 1.0
    clip_eps: float = 0.2
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8


@dataclass
class GuidanceSection:
    lambda_denoise: float = 3.0
    lambda_forward: float = 0.5
    lambda_inference: float = 7.5


@dataclass
class EvalSection:
    rounds: int = 10
    n_samples: int = 256


@dataclass
class SampleSection:
    rounds: int = 5
    n_samples: int = 200


@dataclass
class ExperimentConfig:
    task: str = "relational"
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    reward: RewardSection = field(default_factory=RewardSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sample: SampleSection = field(default_factory=SampleSection)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        d = self.data
        if d.num_classes < 1:
            raise ConfigError(f"data.num_classes must be >= 1, got {d.num_classes}")
        if d.dim < 1 or d.size < 1:
            raise ConfigError("data.dim and data.size must be positive")
        if self.task == "modes":
            for cid in range(d.num_classes):
                if cid not in d.modes:
                    raise ConfigError(f"condition {cid} has no data.modes.{cid} entry")
            for cid, modes in d.modes.items():
                if not 0 <= cid < d.num_classes:
                    raise ConfigError(f"data.modes.{cid} refers to an undefined condition")
                for mean, w in modes:
                    if len(mean) != d.dim:
                        raise ConfigError(f"data.modes.{cid}: mode mean has {len(mean)} coords, dim is {d.dim}")
                    if not w > 0:
                        raise ConfigError(f"data.modes.{cid}: mode weight must be positive")
        else:
            r = self.reward
            if max(r.index_a, r.index_b) >= d.dim:
                raise ConfigError("reward.index_a/index_b exceed data.dim")
        if self.reward.kind not in ("auto", "constant"):
            raise ConfigError(f"reward.kind must be auto or constant, got {self.reward.kind!r}")
        try:
            self.train_config()
            self.guidance_config()
            self.make_schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def conditions(self) -> tuple[int, ...]:
        return tuple(range(self.data.num_classes))

    def make_schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.train.T, self.schedule.beta_start, self.schedule.beta_end)

    def guidance_config(self) -> GuidanceConfig:
        g = self.guidance
        return GuidanceConfig(g.lambda_denoise, g.lambda_forward, g.lambda_inference)

    def oracle(self) -> RewardOracle:
        r = self.reward
        if r.kind == "constant":
            return RewardOracle.constant(r.constant)
        if self.task == "relational":
            return RewardOracle.relational(r.index_a, r.index_b, r.margin, r.sharpness)
        return RewardOracle.mode_affinity(self.data.modes, r.mode_std)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            K=t.K,
            T=t.T,
            G=t.G,
            E=t.E,
            guidance=self.guidance_config(),
            eta_final_round=t.eta_final_round,
            clip_eps=t.clip_eps,
            lr=t.lr,
            beta1=t.beta1,
            beta2=t.beta2,
            weight_decay=t.weight_decay,
            adam_eps=t.adam_eps,
            beta_start=self.schedule.beta_start,
            beta_end=self.schedule.beta_end,
            use_adapters=self.model.use_adapters,
            adapter_rank=self.model.adapter_rank,
            seed=self.seed,
            conditions=self.conditions,
            oracle=self.oracle(),
        )

    def to_text(self) -> str:
        """Resolved config with every default expanded, in the input format."""
        lines = []
        for key, value in _flatten(self):
            lines.append(f"{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _format_value(value) -> str:
    if isinstance(value, str):
        return value
    return json.dumps(value)


def _flatten(cfg: ExperimentConfig):
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sf in dataclasses.fields(value):
                sv = getattr(value, sf.name)
                if sf.name == "modes":
                    for cid in sorted(sv):
                        yield f"{f.name}.modes.{cid}", [[*map(float, m), float(w)] for m, w in sv[cid]]
                else:
                    yield f"{f.name}.{sf.name}", sv
        else:
            yield f.name, value


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _coerce(value, default, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return value
    if isinstance(default, str):
        return value if isinstance(value, str) else json.dumps(value)
    return value


def _parse_modes(value, key: str):
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{key} expects a non-empty list of [mean..., weight] entries")
    modes = []
    for entry in value:
        if not isinstance(entry, list) or len(entry) < 2 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in entry
        ):
            raise ConfigError(f"{key}: bad mode entry {entry!r}")
        modes.append(([float(v) for v in entry[:-1]], float(entry[-1])))
    return modes


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        where = f"{source}:{lineno}"
        if "=" not in body:
            raise ConfigError(f"{where}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if not key or not raw:
            raise ConfigError(f"{where}: empty key or value")
        if key in seen:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        seen.add(key)
        value = _parse_value(raw)
        parts = key.split(".")
        try:
            if len(parts) == 1:
                if parts[0] not in ("task", "seed", "output_dir"):
                    raise ConfigError(f"unknown key {key!r}")
                setattr(cfg, parts[0], _coerce(value, getattr(cfg, parts[0]), key))
            elif len(parts) == 3 and parts[:2] == ["data", "modes"]:
                if not parts[2].isdigit():
                    raise ConfigError(f"mode key needs an integer condition id: {key!r}")
                cfg.data.modes[int(parts[2])] = _parse_modes(value, key)
            elif len(parts) == 2:
                section = getattr(cfg, parts[0], None)
                if not dataclasses.is_dataclass(section) or parts[1] == "modes" or not hasattr(section, parts[1]):
                    raise ConfigError(f"unknown key {key!r}")
                setattr(section, parts[1], _coerce(value, getattr(section, parts[1]), key))
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ConfigError as exc:
            if str(exc).startswith(where):
                raise
            raise ConfigError(f"{where}: {exc}") from None
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
