"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""

import pytest

_OUTCOMES: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when == "teardown" and not rep.failed):
        return
    number, title = marker.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "ok": True, "seconds": 0.0, "failed": []})
    entry["seconds"] += rep.duration
    if rep.failed:
        entry["ok"] = False
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        e = _OUTCOMES[number]
        status = "PASS" if e["ok"] else "FAIL"
        extra = f"  [failed: {', '.join(e['failed'])}]" if e["failed"] else ""
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {e['title']} ({e['seconds']:.1f}s){extra}")
