import numpy as np
import pytest

from atinuke.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rand(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape))


_CRITERIA: list[tuple[str, str, str]] = []


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    label, summary = marker.args
    outcome = "PASS" if call.excinfo is None else "FAIL"
    line = f"criterion {label}: {outcome}  {summary}"
    _CRITERIA.append((label, outcome, line))
    print(f"\n{line}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in _CRITERIA:
        terminalreporter.write_line(line)
