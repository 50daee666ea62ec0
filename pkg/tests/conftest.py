import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("pgada", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pgada")


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


_CRITERIA: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _CRITERIA.setdefault(mark.args[0], []).append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        runs = _CRITERIA[n]
        status = "PASS" if all(runs) else "FAIL"
        extra = f" ({sum(runs)}/{len(runs)} checks)" if len(runs) > 1 else ""
        terminalreporter.write_line(f"criterion {n:2d}: {status}{extra}")
