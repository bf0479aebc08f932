import pytest

_VERDICTS: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record a one-line pass/fail summary for an acceptance criterion."""

    def record(number: int, name: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}")
        print(_VERDICTS[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
