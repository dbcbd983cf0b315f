import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Recorder for one acceptance criterion; lines are echoed in the
    terminal summary so every pass/fail is visible even under capture."""

    def record(num: int, ok: bool, detail: str) -> bool:
        verdict = "PASS" if ok else "FAIL"
        _ACCEPTANCE_LINES.append(f"criterion {num}: {verdict}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
