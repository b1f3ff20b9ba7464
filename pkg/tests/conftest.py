import numpy as np
import pytest
from hypothesis import settings

from tensormatch.grid import SspConfig
from tensormatch.validation import blob_template

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number = getattr(report, "criterion", None)
    if number is None:
        return
    prev = _criteria.get(number[0], (number[1], True))
    _criteria[number[0]] = (number[1], prev[1] and report.passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = (mark.args[0], mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture(scope="session")
def cfg():
    return SspConfig(1.0, 8.0, 10.0)


@pytest.fixture(scope="session")
def particle():
    return blob_template()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
