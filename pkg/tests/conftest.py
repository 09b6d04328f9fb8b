import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_stochastic(rng, shape):
    x = rng.uniform(0.01, 1.0, size=shape)
    return x / x.sum(axis=-1, keepdims=True)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion(request):
    """Call with (name, passed, detail); the line is printed in the terminal summary."""
    def record(name, passed, detail):
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
