"""Shared pytest plumbing.

Acceptance-style tests record one line per criterion through
`helpers.record_criterion`; the lines are replayed in the terminal summary so
they survive output capture.
"""

from helpers import ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(line)
