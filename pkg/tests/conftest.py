import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")

_CRITERIA = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        _CRITERIA[crit] = (report.outcome, props.get("title", ""), props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_CRITERIA):
        outcome, title, detail = _CRITERIA[crit]
        verdict = "PASS" if outcome == "passed" else "FAIL" if outcome == "failed" else outcome.upper()
        terminalreporter.write_line(f"criterion {crit}: {verdict}  {title}  {detail}".rstrip())


@pytest.fixture(autouse=True)
def _criterion_tag(request):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        request.node.user_properties.append(("criterion", mark.args[0]))
        request.node.user_properties.append(("title", mark.args[1]))
    yield


@pytest.fixture
def detail(request):
    """Call with a short string to attach a measured value to the criterion line."""

    def put(text: str):
        request.node.user_properties.append(("detail", text))
        print(text)

    return put
