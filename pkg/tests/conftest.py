import pytest

_LINES_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Record one summary line per acceptance criterion; printed at the end of the run."""
    lines = request.config.stash.setdefault(_LINES_KEY, {})

    def record(number: int, name: str, passed: bool, detail: str) -> None:
        lines[number] = f"criterion {number} ({name}): {'PASS' if passed else 'FAIL'} | {detail}"
        print(lines[number])

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
