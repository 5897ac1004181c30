import numpy as np
import pytest

from dfil.datasets import preset_stream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def four_domain():
    return preset_stream("four-domain", 7)


_CRITERIA = pytest.StashKey[dict]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    report = outcome.get_result()
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = dict(item.user_properties).get("detail", "")
        if not report.passed and not detail:
            detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
        item.config.stash.setdefault(_CRITERIA, {})[marker.args[0]] = (marker.args[1], report.passed, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        title, ok, detail = results[num]
        terminalreporter.write_line(f"criterion {num} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
