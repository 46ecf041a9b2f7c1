import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lowrank_serve.checkpoint import normalize  # noqa: E402
from lowrank_serve.compress import compress_plain, generate_toy_dense  # noqa: E402
from lowrank_serve.config import get_preset  # noqa: E402


@pytest.fixture(scope="session")
def tiny_dense():
    return generate_toy_dense(get_preset("tiny"), 3)


@pytest.fixture(scope="session")
def tiny_model(tiny_dense):
    return normalize(compress_plain(tiny_dense, 0.6))


@pytest.fixture(scope="session")
def desk_dense():
    return generate_toy_dense(get_preset("desk"), 1)


@pytest.fixture(scope="session")
def desk_model(desk_dense):
    return normalize(compress_plain(desk_dense, 0.5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
