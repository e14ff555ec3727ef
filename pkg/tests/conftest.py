import pytest

_STATUS = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    report = outcome.get_result()
    if marker is None or not (report.when == "call" or report.outcome != "passed"):
        return
    number, name = marker.args
    detail = dict(item.user_properties).get("detail", "")
    prev = _RESULTS.get(number)
    if prev is None or prev[1] == "PASS":
        _RESULTS[number] = (name, _STATUS[report.outcome], report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        name, status, duration, detail = _RESULTS[number]
        line = f"criterion {number} {name}: {status} ({duration:.1f} s)"
        if detail:
            line += f"  {detail}"
        terminalreporter.write_line(line)
