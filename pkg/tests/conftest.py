from __future__ import annotations

from collections import defaultdict

import pytest


def pytest_addoption(parser):
    group = parser.getgroup("tcemu")
    group.addoption("--oracle-trials", type=int, default=10_000,
                    help="random tiles per (profile, dtype) pair in the oracle equivalence run")
    group.addoption("--hw-dump", default=None,
                    help="directory holding a hardware dump (responses.jsonl, a/b/c/d.hwkt)")
    group.addoption("--hw-arch", default=None, help="architecture the hardware dump came from")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")
    config._acceptance = defaultdict(list)


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    # the outcome is only known once the hook wrapper returns; recompute cheaply here
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        if call.excinfo is None:
            outcome = "passed"
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            outcome = "skipped"
        else:
            outcome = "failed"
        item.config._acceptance[marker.args].append((item.name, outcome))


def pytest_terminal_summary(terminalreporter, config):
    results = config._acceptance
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), runs in sorted(results.items()):
        outcomes = {o for _, o in runs}
        if "failed" in outcomes:
            verdict = "FAIL"
        elif outcomes == {"skipped"}:
            verdict = "SKIP"
        else:
            verdict = "PASS"
        passed = sum(o == "passed" for _, o in runs)
        terminalreporter.write_line(f"[{verdict}] {number}. {title} ({passed}/{len(runs)} checks passed)")
        for name, outcome in runs:
            if outcome == "failed":
                terminalreporter.write_line(f"         failed: {name}")


@pytest.fixture(scope="session")
def oracle_trials(request) -> int:
    return request.config.getoption("--oracle-trials")
