import json
from pathlib import Path

import pytest

from cegan.data import DEFAULT_ATTRIBUTES

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def table4_rows():
    """Per-class values (percent) and printed overall accuracy of the comparison tables."""
    return json.loads((FIXTURES / "table4_accuracy.json").read_text())


@pytest.fixture
def attribute_names():
    return list(DEFAULT_ATTRIBUTES)


_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion."""
    def record(number: int, passed: bool, detail: str):
        request.config.stash[_RESULTS].append((number, passed, detail))
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(results):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
