import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Record one PASS/FAIL line for an acceptance criterion; reprinted at session end."""

    def _record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
