"""Shared pytest wiring.

The acceptance suite records one line per criterion in `criterion_lines`;
this hook replays them after the run through the terminal reporter, which
writes outside pytest's capture, so the PASS/FAIL lines show up even for
passing tests under a plain `pytest` invocation.
"""

criterion_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in criterion_lines:
            terminalreporter.line(line)
