"""Shared test plumbing: the acceptance-criteria summary block.

Acceptance tests record one line per criterion via ``record_criterion``;
the lines are printed in their own section of the terminal summary so the
pass/fail verdicts are visible without -s, in criterion order.
"""

_criterion_lines: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    _criterion_lines[number] = f"[criterion {number}] {status}: {detail}"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criterion_lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criterion_lines):
        terminalreporter.write_line(_criterion_lines[number])
