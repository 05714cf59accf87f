"""Shared pytest configuration.

The acceptance tests register one verdict line apiece; the hook below
prints them in a dedicated section after the run so the per-criterion
results are visible in plain ``pytest -v`` output even though stdout
inside tests is captured.
"""

_CRITERION_LINES = []


def record_criterion(line: str) -> None:
    _CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in _CRITERION_LINES:
        terminalreporter.write_line(line)
