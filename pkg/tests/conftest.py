import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

CRITERION_LINES = []


def record_criterion(line: str):
    """Collect one PASS/FAIL line per acceptance criterion."""
    CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)
