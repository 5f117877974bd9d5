import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        details = [str(v) for k, v in item.user_properties if k == "detail"]
        if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
            details.append(report.longrepr[2])
        _RESULTS[marker.args[0]] = (marker.args[1], status, "; ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, status, detail = _RESULTS[n]
        line = f"[{status}] {n:2d}. {title}"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
