"""Shared pytest hooks: per-criterion pass/fail lines for the acceptance suite."""

from __future__ import annotations

import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(number, title): acceptance criterion metadata"
    )


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" and not (report.when == "setup" and report.skipped):
        return
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(
        report.outcome, report.outcome.upper()
    )
    number, title = marker.args
    line = f"[{status}] acceptance criterion {number}: {title}"
    item.config.pluginmanager.get_plugin("terminalreporter").write_line(line)
