"""Acceptance bookkeeping: one PASS/FAIL line per criterion at the end of the run."""
import pytest

_RESULTS: dict = {}
_DETAILS: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def _criterion(item):
    m = item.get_closest_marker("criterion")
    return (m.args[0], m.args[1]) if m else None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    key = _criterion(item)
    if key is None:
        return
    if rep.failed or rep.skipped:
        _RESULTS[key] = False
    elif rep.when == "call":
        _RESULTS.setdefault(key, True)


@pytest.fixture
def measured(request):
    """Record a measured value to print next to the criterion's verdict."""
    key = _criterion(request.node)

    def record(text):
        _DETAILS.setdefault(key, []).append(str(text))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for (number, title), ok in sorted(_RESULTS.items()):
        tr.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
        for line in _DETAILS.get((number, title), []):
            tr.write_line(f"    {line}")
