"""Prints one PASS/FAIL line per acceptance criterion at the end of the session."""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_(A\d+)_")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if m is None or rep.when != "call" and outcome != "error":
                continue
            detail = dict(rep.user_properties).get("detail", "")
            lines.append((int(m.group(1)[1:]), f"{m.group(1)} {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)
