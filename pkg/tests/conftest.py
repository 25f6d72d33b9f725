import pytest

_criteria = {}
_outcomes = {}
_notes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _criteria[item.nodeid] = number
            _outcomes.setdefault(number, {"title": title, "passed": True, "ran": False})


def pytest_runtest_logreport(report):
    number = _criteria.get(report.nodeid)
    if number is None:
        return
    state = _outcomes[number]
    if report.failed or (report.when == "call" and report.skipped):
        state["passed"] = False
    if report.when == "call":
        state["ran"] = True


@pytest.fixture
def note(request):
    """Attach a measured value to the criterion line in the summary."""
    mark = request.node.get_closest_marker("criterion")

    def add(text):
        _notes.setdefault(mark.args[0], []).append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        state = _outcomes[number]
        if not state["ran"] and state["passed"]:
            verdict = "NOT RUN"
        else:
            verdict = "PASS" if state["passed"] else "FAIL"
        line = f"criterion {number:2d}: {verdict}  {state['title']}"
        if number in _notes:
            line += "  [" + "; ".join(_notes[number]) + "]"
        terminalreporter.write_line(line)
