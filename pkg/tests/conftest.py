"""Acceptance reporting: one PASS/FAIL line per acceptance criterion."""

from __future__ import annotations

import pytest

_RESULTS: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "passed": True, "seconds": 0.0, "ran": False})
    if report.when == "call":
        entry["ran"] = True
        entry["seconds"] += report.duration
    if report.failed or (report.when == "call" and report.skipped):
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["passed"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number}: {entry['title']} ({entry['seconds']:.2f} s)")
