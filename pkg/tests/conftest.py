"""Collects the acceptance suite's one-line verdicts and prints them after the run."""

_acceptance_lines: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for key, value in report.user_properties:
        if key == "acceptance":
            _acceptance_lines[value[0]] = value[1]


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_acceptance_lines):
            terminalreporter.write_line(_acceptance_lines[n])
