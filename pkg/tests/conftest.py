import re

import pytest

_CRITERIA: dict[int, list[str]] = {}
_DETAILS: dict[int, list[str]] = {}
_PATTERN = re.compile(r"test_criterion_(\d+)[a-z]?_")


@pytest.fixture
def detail(request):
    """Callable that attaches a measurement line to the criterion summary."""
    m = _PATTERN.search(request.node.nodeid)
    number = int(m.group(1)) if m else -1
    return lambda text: _DETAILS.setdefault(number, []).append(text)


def pytest_runtest_logreport(report):
    m = _PATTERN.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.setdefault(int(m.group(1)), []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok = all(o == "passed" for o in _CRITERIA[number])
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}"
        if _DETAILS.get(number):
            line += "  (" + "; ".join(_DETAILS[number]) + ")"
        terminalreporter.write_line(line)
