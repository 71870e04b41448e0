from pathlib import Path

import numpy as np
import pytest

from srrl.checkpoint import load_checkpoint
from srrl.schedule import make_linear_schedule

DATA = Path(__file__).parent / "data"
ROOT = Path(__file__).parent.parent


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def two_step():
    """T=2 schedule with alpha_bars = [0.5, 0.25]."""
    return make_linear_schedule(2, 0.5, 0.5)


@pytest.fixture(scope="session")
def pinned():
    """Pretrained modes-task network (configs/modes.cfg, seed 0)."""
    params, schedule, _ = load_checkpoint(DATA / "pinned_modes.json")
    return params, schedule


def zero_net(params):
    q = params.copy()
    for k in q.tensors:
        q.tensors[k] = np.zeros_like(q.tensors[k])
    return q


def probe_inputs(seed=0):
    """100 clean points around the two condition-0 modes of the pinned network."""
    g = np.random.default_rng(seed)
    return np.concatenate([g.normal([2, 2], 0.5, (50, 2)), g.normal([-2, 2], 0.5, (50, 2))])


def rescaled(params, T):
    """Same network and continuous noise level, discretised with T steps instead of 20."""
    q = params.copy()
    q.num_steps = T
    return q, make_linear_schedule(T, 0.01 * 20 / T, 0.4 * 20 / T)


def median_round_trip_error(params, T, x0, c=0, lam=0.5):
    from srrl.sampler import condition_guided_forward, denoise

    q, s = rescaled(params, T)
    back = denoise(q, s, condition_guided_forward(q, s, x0, c, lam), c, lam)
    return float(np.median(np.linalg.norm(back - x0, axis=1) / np.linalg.norm(x0, axis=1)))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
