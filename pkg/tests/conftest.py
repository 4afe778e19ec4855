import os

import numpy as np
import pytest

os.environ.setdefault("MPL_SSL_DETERMINISTIC", "1")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list = []


def record_criterion(line: str) -> None:
    _CRITERIA.append(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
