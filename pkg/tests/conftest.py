"""Collects acceptance verdict lines and prints them after the test run."""

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str = "", informational: bool = False) -> None:
    tag = "PASS" if passed else "FAIL"
    if informational:
        tag += " (informational)"
    ACCEPTANCE_LINES.append(f"[{tag}] {criterion}: {detail}".rstrip(": "))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
