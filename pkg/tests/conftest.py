import pytest

# criterion number -> (description, failed)
_outcomes: dict[int, tuple[str, bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, text = mark.args
    prev_failed = _outcomes.get(n, (text, False))[1]
    _outcomes[n] = (text, prev_failed or rep.failed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        text, failed = _outcomes[n]
        terminalreporter.write_line(f"criterion {n}: {'FAIL' if failed else 'PASS'}  {text}")
