import pytest

_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Call ``criterion(number, title, passed, detail)`` once per test; a test
    that errors before recording is reported as FAIL.
    """
    lines = request.config.stash[_ACCEPTANCE]
    recorded = []

    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        recorded.append(line)
        lines.append((number, line))
        print(line)

    yield record
    if not recorded:
        number = request.node.get_closest_marker("criterion").args[0]
        lines.append((number, f"[FAIL] criterion {number}: {request.node.name} (error before the check completed)"))


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_ACCEPTANCE]
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
