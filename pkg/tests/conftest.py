import pytest

_results: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and rep.passed:
        return
    num, title = mark.args
    _, outcomes = _results.setdefault(num, (title, []))
    outcomes.append("skip" if rep.skipped else "pass" if rep.passed else "fail")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_results):
        title, outcomes = _results[num]
        verdict = "FAIL" if "fail" in outcomes else "SKIP" if "skip" in outcomes else "PASS"
        tr.write_line(f"[{verdict}] criterion {num:>2}: {title}")
    passed = sum("fail" not in o and "skip" not in o for _, o in _results.values())
    tr.write_line(f"{passed}/{len(_results)} criteria passed")
