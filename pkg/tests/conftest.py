"""Collects acceptance verdicts and prints them at the end of the session."""
import pytest

VERDICTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    def record(criterion: str, ok: bool, detail: str = "") -> None:
        VERDICTS[criterion] = (bool(ok), detail)
        assert ok, f"{criterion}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(VERDICTS):
        ok, detail = VERDICTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
