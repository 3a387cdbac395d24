from __future__ import annotations

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            n, title = m.args
            _CRITERIA.setdefault(n, {"title": title, "tests": {}})
            _CRITERIA[n]["tests"][item.nodeid] = None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    tests = _CRITERIA[m.args[0]]["tests"]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        tests[item.nodeid] = (rep.passed, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        c = _CRITERIA[n]
        results = list(c["tests"].values())
        if any(r is None for r in results):
            status = "NOT RUN"
        else:
            status = "PASS" if all(ok for ok, _ in results) else "FAIL"
        secs = sum(r[1] for r in results if r is not None)
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {c['title']} ({len(results)} tests, {secs:.2f} s)")
