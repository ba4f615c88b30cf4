import numpy as np
import pytest
from hypothesis import settings

from nlcs import oracle

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number and summary")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marks = getattr(report, "criterion", None)
    if marks is not None:
        n, text = marks
        _criteria[n] = (report.outcome == "passed", text)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        rep.criterion = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, text = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")


BIMODAL = dict(L=8.0, M=10.0, eps=0.1)


def bimodal_oracle():
    spec = oracle.MixtureSpec([0.5, 0.5], [[-3.0], [3.0]], [np.eye(1), np.eye(1)])
    return oracle.make_mixture(spec)
