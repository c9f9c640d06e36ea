import numpy as np
import pytest
import torch

torch.set_num_threads(1)

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion gate")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    num, title = m.args
    entry = _criteria.setdefault(num, {"title": title, "ok": True, "ran": False, "tests": 0})
    if rep.when == "call":
        entry["ran"] = True
        entry["tests"] += 1
    if rep.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_criteria):
        e = _criteria[num]
        status = "PASS" if e["ok"] and e["ran"] else ("FAIL" if e["ran"] or not e["ok"] else "NOT RUN")
        tr.write_line(f"criterion {num:2d}: {status}  {e['title']}  ({e['tests']} test(s))")
