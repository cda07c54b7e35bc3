import re

import pytest

_RESULTS = {}


def _order(key):
    num, suffix = re.match(r"(\d+)(.*)", key).groups()
    return int(num), suffix


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(key, passed, detail)."""
    def record(key, passed, detail):
        _RESULTS[str(key)] = (bool(passed), detail)
        print(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_RESULTS, key=_order):
        passed, detail = _RESULTS[key]
        terminalreporter.write_line(f"criterion {key:<3} {'PASS' if passed else 'FAIL'}  {detail}")
