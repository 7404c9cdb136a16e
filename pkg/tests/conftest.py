"""Collect acceptance outcomes and print one pass/fail line per criterion at the end of the run."""

import pytest

_RESULTS = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion checked by this test")


@pytest.fixture
def measured(request):
    """Dict a test fills with the numbers it measured; shown on its summary line."""
    values = {}
    request.node._measured = values
    return values


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and rep.skipped):
        if hasattr(rep, "wasxfail"):
            status = "FAIL"  # an expected, documented miss
        elif rep.skipped:
            status = "SKIP"
        else:
            status = "PASS" if rep.passed else "FAIL"
        detail = getattr(item, "_measured", {})
        why = rep.longrepr[2] if rep.skipped and isinstance(rep.longrepr, tuple) else ""
        _RESULTS.append((label, status, detail, why))


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for label, status, detail, why in _RESULTS:
        extra = ", ".join(f"{k}={_fmt(v)}" for k, v in detail.items())
        if status == "SKIP" and why:
            extra = why.removeprefix("Skipped: ")
        tr.write_line(f"[{status}] {label}" + (f"  ({extra})" if extra else ""))
