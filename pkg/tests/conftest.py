from __future__ import annotations

import pytest

_CRITERIA: dict[int, dict] = {}
_INFO: dict[str, object] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            n, title = mark.args
            entry = _CRITERIA.setdefault(n, {"title": title, "tests": {}})
            entry["tests"][item.nodeid] = None


def pytest_runtest_logreport(report):
    for entry in _CRITERIA.values():
        if report.nodeid not in entry["tests"]:
            continue
        prev = entry["tests"][report.nodeid]
        if report.failed:
            entry["tests"][report.nodeid] = "failed"
        elif report.when == "call" and prev is None:
            entry["tests"][report.nodeid] = "skipped" if report.skipped else "passed"
        elif report.skipped and prev is None:
            entry["tests"][report.nodeid] = "skipped"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        states = list(entry["tests"].values())
        if any(s == "failed" for s in states):
            verdict = "FAIL"
        elif states and all(s == "passed" for s in states):
            verdict = "PASS"
        elif all(s is None for s in states):
            verdict = "NOT RUN"
        else:
            verdict = "INCOMPLETE"
        terminalreporter.write_line(f"criterion {n:2d}  {verdict:10s} {entry['title']}")
    for key in sorted(_INFO):
        terminalreporter.write_line(f"  {key}: {_INFO[key]}")


@pytest.fixture(scope="session")
def acceptance_info():
    """Free-form numbers collected by acceptance tests and echoed at the end."""
    return _INFO
