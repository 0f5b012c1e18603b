import pytest

# filled by test_acceptance.py: (criterion number, title, passed, detail)
ACCEPTANCE_LINES: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {detail}")
