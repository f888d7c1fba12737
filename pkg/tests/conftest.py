import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one ``ACCEPTANCE <n> PASS|FAIL`` line; all lines are repeated in the terminal summary."""
    lines = request.config.stash[_LINES_KEY]

    def report(number: int, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {detail}"
        lines.append((number, line))
        print(line)

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
