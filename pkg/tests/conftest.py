import pytest

_ACCEPTANCE_LINES: list = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the line is printed in the terminal summary."""

    def record(name: str, passed, detail: str):
        tag = "N/A " if passed is None else ("PASS" if passed else "FAIL")
        line = f"[{tag}] {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
