import time
from pathlib import Path

import pytest

from tms.datastore import load_road_graph

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"


def wait_for(pred, timeout=5.0, interval=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(interval)
    return pred()


@pytest.fixture
def triangle():
    return load_road_graph(SCENARIOS / "triangle.map")


@pytest.fixture
def triangle_path():
    return SCENARIOS / "triangle.map"


_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or not mark.args:
        return
    number, title = mark.args
    if rep.when == "call" or rep.failed:
        prev = _criteria.get(number)
        ok = rep.passed and (prev is None or prev[1])
        _criteria[number] = (title, ok, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, secs = _criteria[number]
        terminalreporter.write_line(
            f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} ({secs:.1f} s)")
