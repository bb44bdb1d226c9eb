import os

import numpy as np
import pytest

RESULTS: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def prism_bundle():
    path = os.environ.get("SPOTREE_PRISM_BUNDLE")
    if not path:
        pytest.skip("set SPOTREE_PRISM_BUNDLE to a PRISM explicit export to run this check")
    return path
