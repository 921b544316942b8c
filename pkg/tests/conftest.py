import pytest

_LINES = []


class Verdicts:
    """Records one PASS/FAIL line per acceptance criterion."""

    def check(self, number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] AC-{number:02d} {title}" + (f": {detail}" if detail else "")
        print(line)
        _LINES.append(line)
        assert ok, line


@pytest.fixture
def verdict():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
