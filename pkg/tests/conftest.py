"""Prints one PASS/FAIL line per acceptance criterion after the run."""

import re

_LINES = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    failed = report.failed
    if report.when == "call" or failed:
        detail = dict(report.user_properties).get("detail", "")
        status = "FAIL" if failed else ("SKIP" if report.skipped else "PASS")
        if n not in _LINES or failed:
            _LINES[n] = f"criterion {n:2d}: {status}  {detail}".rstrip()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_LINES):
        terminalreporter.write_line(_LINES[n])
