import numpy as np
import pytest

import acceptance_log

from backbone_maxent.synthetic import helix, random_backbone


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def helix10():
    return helix(10)


@pytest.fixture
def random_chain20(rng):
    return random_backbone(20, rng)


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance_log.LINES):
        terminalreporter.write_line(acceptance_log.LINES[number])
