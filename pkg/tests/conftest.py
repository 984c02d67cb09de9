"""Collects acceptance results and prints one line per criterion at the end of the run."""
from collections import defaultdict

import pytest

_results = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        details = [v for k, v in item.user_properties if k == "detail"]
        if hasattr(rep, "wasxfail"):
            status = "FAIL"
            details.append(f"expected failure: {rep.wasxfail}")
        elif rep.passed:
            status = "PASS"
        elif rep.skipped:
            status = "SKIP"
        else:
            status = "FAIL"
        _results[mark.args[0]].append((item.name, status, details))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        checks = _results[n]
        overall = "PASS" if all(s == "PASS" for _, s, _ in checks) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {overall}")
        for name, status, details in checks:
            text = "; ".join(details)
            terminalreporter.write_line(f"    {status} {name}" + (f": {text}" if text else ""))
