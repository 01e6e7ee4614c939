from __future__ import annotations

import numpy as np
import pytest

from zigzag_tree.tau import RankedTopology


@pytest.fixture
def caterpillar4():
    return RankedTopology.from_pairs(4, [(1, 2), ([1, 2], 3), ([1, 2, 3], 4)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
