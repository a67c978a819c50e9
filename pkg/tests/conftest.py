import re

_results = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    failed = report.failed
    if report.when == "call" or failed:
        _results[key] = _results.get(key, True) and not failed


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), ok in sorted(_results.items()):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {num:2d}  {name.replace('_', ' ')}")
