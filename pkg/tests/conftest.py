import numpy as np
import pytest

from rfidlab import autodiff as ad


@pytest.fixture(autouse=True)
def _clean_tape():
    ad.reset_tape()
    yield
    ad.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line each at the end of the
# run; details come from ``record_property("detail", ...)``.

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed and call.excinfo is not None:
        detail = (detail + "; " if detail else "") + call.excinfo.exconly().splitlines()[0]
    prev = _CRITERIA.get(n)
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    if prev is None or prev[1] == "PASS":
        _CRITERIA[n] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}: {detail}")
