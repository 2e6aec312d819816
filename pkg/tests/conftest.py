"""Prints one ACCEPTANCE line per tagged criterion at the end of the session."""

import pytest

_results: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, text): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    cid, text = marker.args
    entry = _results.setdefault(cid, [text, True, False])
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry[1] = False
    if call.when == "call":
        entry[2] = True


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")

    def order(cid):
        digits = "".join(ch for ch in cid if ch.isdigit())
        return int(digits), cid

    for cid in sorted(_results, key=order):
        text, ok, ran = _results[cid]
        status = "PASS" if ok and ran else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {cid:>3} {status}  {text}")
