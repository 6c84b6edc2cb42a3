import pytest

# criterion number -> list of (test name, status, detail)
_ACCEPTANCE: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): test checks acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    # a failing setup (e.g. the shared training fixture) counts against the criterion
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        status = "xfail" if hasattr(rep, "wasxfail") else ("pass" if rep.passed else "fail")
        _ACCEPTANCE.setdefault(mark.args[0], []).append((item.name, status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        rows = _ACCEPTANCE[n]
        states = {st for _, st, _ in rows}
        # a strict xfail means the literal criterion is known not to hold
        verdict = "FAIL" if "fail" in states else ("XFAIL" if "xfail" in states else "PASS")
        details = " | ".join(d for _, _, d in rows if d)
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {details}")
