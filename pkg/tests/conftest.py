import time
from dataclasses import replace
from typing import NamedTuple

import hypothesis
import numpy as np
import pytest

from collabinfer import harness

hypothesis.settings.register_profile("default", max_examples=100, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_config():
    """Default chain with a 150-task workload, for quick end-to-end checks."""
    cfg = harness.default_config()
    return replace(cfg, workload=replace(cfg.workload, n_tasks=150))


class SweepRun(NamedTuple):
    report: harness.SweepReport
    outcomes: dict
    seconds: float


@pytest.fixture(scope="session")
def default_sweep():
    """Full default sweep (1000 tasks, 12 cells), computed once per session."""
    started = time.perf_counter()
    report, outcomes = harness.run_sweep(harness.default_config(), keep_outcomes=True)
    return SweepRun(report, outcomes, time.perf_counter() - started)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
