import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion.

    Call as ``criterion(number, title, passed, detail)``; the lines are
    printed together at the end of the run.  A test that errors before
    recording still gets a FAIL line.
    """
    lines = request.config.stash[_LINES_KEY]
    seen = []

    def record(number, title, passed, detail=""):
        line = f"criterion {number:>2} {title}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        seen.append(line)
        lines.append(line)
        print(line)
        return passed

    yield record
    if not seen:
        lines.append(f"criterion -- {request.node.name}: FAIL  (raised before measuring)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
