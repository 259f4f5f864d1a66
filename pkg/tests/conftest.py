import re

_results: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance.py" not in report.nodeid:
        return
    m = re.search(r"test_criterion_(\w+?)__(\w+)", report.nodeid)
    if m:
        _results.append((m.group(1), m.group(2).replace("_", " "), "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for crit, name, status in _results:
        terminalreporter.write_line(f"{status}  criterion {crit:<3} {name}")
