import logging
from functools import lru_cache

import numpy as np
import pytest

from cutmaxwell.analysis import Settings, build_problem
from cutmaxwell.cases import builtin_case


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.ERROR, logger="cutmaxwell")


@lru_cache(maxsize=None)
def cached_problem(example="circle", r=1, m=0, n=6, offset=(0.0, 0.0)):
    """Problems are read-only in the tests, so one instance per key is shared."""
    return build_problem(builtin_case(example), r, m, n, Settings(), offset)


@pytest.fixture
def circle6():
    return cached_problem("circle", 1, 0, 6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=_criterion_key):
        ok, detail = RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


def _criterion_key(key):
    return (int(key[0]), key[1:])
