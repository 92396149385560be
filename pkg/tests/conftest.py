"""Shared test fixtures and the acceptance criterion report.

Acceptance tests register a one-line verdict per criterion through the
``criterion`` fixture; the terminal summary prints them all so a test run
ends with an explicit pass/fail line for every acceptance check.
"""

from contextlib import contextmanager

import pytest

_VERDICTS = {}


class CriterionRecorder:
    @contextmanager
    def check(self, number, description):
        """Record PASS if the block exits cleanly, FAIL if it raises."""
        key = (number, description)
        try:
            yield
        except Exception:
            _VERDICTS[key] = "FAIL"
            raise
        _VERDICTS[key] = "PASS"


@pytest.fixture
def criterion():
    return CriterionRecorder()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for (number, description), verdict in sorted(_VERDICTS.items()):
        terminalreporter.write_line(f"C{number:02d} {verdict}: {description}")
