import pytest

CRITERIA: dict[str, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        CRITERIA[name] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for name in sorted(CRITERIA, key=lambda n: int(n.split()[0].split(".")[0].rstrip("abc"))):
            terminalreporter.write_line(CRITERIA[name])
