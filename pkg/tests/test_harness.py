import csv
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from srrl.checkpoint import CheckpointError, checkpoint_text, load_checkpoint, parse_checkpoint, save_checkpoint
from srrl.cli import main
from srrl.config import ConfigError, load_config, parse_config
from srrl.data import generate_dataset
from srrl.diagnostics import FAULTS, small_net
from srrl.reflect import METRICS_COLUMNS
from srrl.report import CsvStream, round_color, scatter_svg
from srrl.schedule import make_linear_schedule

from conftest import ROOT

SMOKE = str(ROOT / "configs" / "smoke.cfg")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# config


def test_shipped_configs_parse():
    for name in ("relational", "modes", "smoke"):
        cfg = load_config(ROOT / "configs" / f"{name}.cfg")
        assert cfg.train_config().K >= 1


def test_comments_and_defaults():
    cfg = parse_config("# header\ntask = relational  # trailing\n\ntrain.K = 3\nguidance.lambda_forward = 1\n")
    assert cfg.train.K == 3 and cfg.guidance.lambda_forward == 1.0
    assert cfg.train.G == 32 and cfg.train.T == 20 and cfg.train.E == 2


@pytest.mark.parametrize(
    "text, line",
    [
        ("task = relational\ntrain.K\n", 2),
        ("seed = 1\n\nbogus.key = 3\n", 3),
        ("train.K = 2\ntrain.K = 3\n", 2),
        ("train.K = two\n", 1),
        ("model.use_adapters = 1\n", 1),
        ("data.modes.x = [[0, 1]]\n", 1),
    ],
)
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError, match=rf"exp\.cfg:{line}:"):
        parse_config(text, "exp.cfg")


@pytest.mark.parametrize(
    "text",
    [
        "data.num_classes = 0\n",
        "task = images\n",
        "train.G = 1\n",
        "task = modes\ndata.num_classes = 2\ndata.modes.0 = [[0, 0, 1]]\n",
        "task = modes\ndata.num_classes = 1\ndata.modes.0 = [[0, 1]]\n",
        "reward.index_b = 2\n",
        "guidance.lambda_forward = -1\n",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_resolved_text_round_trips():
    cfg = load_config(ROOT / "configs" / "modes.cfg")
    again = parse_config(cfg.to_text())
    assert again == cfg and again.digest() == cfg.digest()


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


# data


def test_single_mode_mean():
    cfg = parse_config("task = modes\ndata.num_classes = 1\ndata.size = 10000\ndata.modes.0 = [[3, 0, 1]]\n")
    x, c = generate_dataset(cfg, np.random.default_rng(0))
    assert x.shape == (10000, 2) and np.all(c == 0)
    assert np.max(np.abs(x.mean(axis=0) - [3.0, 0.0])) < 0.05


def test_mixture_weights_respected():
    cfg = parse_config(
        "task = modes\ndata.num_classes = 1\ndata.size = 20000\ndata.mode_std = 0.1\n"
        "data.modes.0 = [[5, 0, 1], [-5, 0, 3]]\n"
    )
    x, _ = generate_dataset(cfg, np.random.default_rng(1))
    assert np.mean(x[:, 0] > 0) == pytest.approx(0.25, abs=0.01)


def test_dataset_is_deterministic():
    cfg = load_config(ROOT / "configs" / "modes.cfg")
    a, ca = generate_dataset(cfg)
    b, cb = generate_dataset(cfg)
    assert a.tobytes() == b.tobytes() and ca.tobytes() == cb.tobytes()


def test_relational_data_is_broad():
    cfg = parse_config("data.size = 20000\ndata.num_classes = 3\n")
    x, c = generate_dataset(cfg, np.random.default_rng(0))
    assert set(np.unique(c)) == {0, 1, 2}
    np.testing.assert_allclose(x.std(axis=0), 1.0, atol=0.03)


# checkpoint


def test_checkpoint_round_trip_is_byte_identical(tmp_path, rng):
    p = small_net(rng, adapters=True)
    s = make_linear_schedule(p.num_steps, 0.05, 0.3)
    save_checkpoint(tmp_path / "a.json", p, s, {"seed": 4, "stage": "test"})
    q, s2, prov = load_checkpoint(tmp_path / "a.json")
    save_checkpoint(tmp_path / "b.json", q, s2, prov)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert q.adapter_enabled and q.adapter_rank == p.adapter_rank
    for k in p.tensors:
        assert np.array_equal(p.tensors[k], q.tensors[k])
    assert s2.T == s.T and np.array_equal(s2.betas, s.betas)


def test_checkpoint_version_mismatch(rng):
    p = small_net(rng)
    text = checkpoint_text(p, make_linear_schedule(p.num_steps, 0.05, 0.3))
    with pytest.raises(CheckpointError, match="version"):
        parse_checkpoint(text.replace('"format_version": 1', '"format_version": 99'))
    with pytest.raises(CheckpointError):
        parse_checkpoint("{not json")


# report


def test_csv_stream_flushes_each_row(tmp_path):
    path = tmp_path / "m.csv"
    with CsvStream(path, ("a", "b")) as s:
        s.write({"a": 1, "b": 0.1})
        assert read_csv(path) == [["a", "b"], ["1", "0.1"]]


def test_svg_is_well_formed():
    pts = np.array([[0.0, 0.0], [1.0, -1.0], [9.0, 9.0]])
    svg = scatter_svg(pts, np.array([0, 1, 1]), round_color(2, 5), title="r", line=(1.0, -2.0))
    root = ET.fromstring(svg)
    assert root.get("viewBox") == "0 0 600 600"
    assert round_color(0, 5) != round_color(4, 5)


# cli


def run(*argv):
    return main(list(argv))


def test_smoke_train(tmp_path):
    out = tmp_path / "smoke"
    assert run("train", "--config", SMOKE, "--out", str(out)) == 0
    rows = read_csv(out / "metrics.csv")
    assert tuple(rows[0]) == METRICS_COLUMNS and len(rows) == 2
    for name in ("pretrained.json", "trained.json", "pretrain_loss.csv", "train.resolved.cfg"):
        assert (out / name).exists()
    resolved = load_config(out / "train.resolved.cfg")
    assert resolved.output_dir == str(out) and resolved.train.G == 2

    assert run("sample", "--config", SMOKE, "--out", str(out)) == 0
    samples = read_csv(out / "samples.csv")
    assert samples[0] == ["round", "condition", "index", "x0", "x1", "reward"]
    assert len(samples) == 1 + 3 * 2 * 10
    for k in range(3):
        assert ET.parse(out / f"samples_round_{k}.svg").getroot().get("viewBox") == "0 0 600 600"

    assert run("eval", "--config", SMOKE, "--out", str(out)) == 0
    assert read_csv(out / "eval_rounds.csv")[0] == ["round", "mean_reward"]
    assert len(read_csv(out / "eval_rounds.csv")) == 4


def test_train_from_checkpoint_and_seed_override(tmp_path):
    a = tmp_path / "a"
    assert run("pretrain", "--config", SMOKE, "--out", str(a), "--seed", "7") == 0
    assert load_config(a / "pretrain.resolved.cfg").seed == 7
    assert run("train", "--config", SMOKE, "--out", str(a), "--checkpoint", str(a / "pretrained.json")) == 0
    assert len(read_csv(a / "metrics.csv")) == 2


def test_cli_usage_errors(tmp_path, capsys):
    assert run("train", "--config", str(tmp_path / "missing.cfg")) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.K = 1\ntrain.oops = 2\n")
    assert run("pretrain", "--config", str(bad), "--out", str(tmp_path)) == 1
    assert "bad.cfg:2" in capsys.readouterr().err
    assert run("sample", "--config", SMOKE, "--out", str(tmp_path / "empty")) == 1
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 1


def test_incompatible_checkpoint(tmp_path, rng):
    p = small_net(rng, num_steps=7)
    save_checkpoint(tmp_path / "x.json", p, make_linear_schedule(7, 0.05, 0.3))
    assert run("sample", "--config", SMOKE, "--out", str(tmp_path), "--checkpoint", str(tmp_path / "x.json")) == 1


def test_diagnose_healthy(capsys):
    assert run("diagnose") == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and out.count("[PASS]") == 7


@pytest.mark.parametrize("fault", FAULTS)
def test_diagnose_catches_faults(fault, capsys):
    assert run("diagnose", "--inject-fault", fault) == 2
    assert capsys.readouterr().out.count("[FAIL]") == 1
