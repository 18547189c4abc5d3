import pytest


@pytest.fixture
def record_criterion(request):
    """Record one acceptance line; the terminal summary prints them all."""

    def record(number: int, passed: bool, detail: str) -> None:
        lines = request.config.stash.setdefault(_KEY, {})
        lines[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"

    return record


_KEY = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
