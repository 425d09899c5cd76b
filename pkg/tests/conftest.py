import pytest

_CRITERIA: dict[int, tuple[str, str, float]] = {}
_SETUP_TIME: dict[str, float] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if report.when == "setup":
        _SETUP_TIME[item.nodeid] = report.duration
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else "FAIL"
        elapsed = report.duration + (_SETUP_TIME.get(item.nodeid, 0.0) if report.when == "call" else 0.0)
        _CRITERIA[n] = (title, status, elapsed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, dur = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}  ({dur:.2f}s)")
