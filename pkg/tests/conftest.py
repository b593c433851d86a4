import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from podex import models
from podex.hamsys import HamiltonianModel

settings.register_profile("podex", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("podex")


def corpus():
    """Hamiltonians shared by the derivative and identity checks."""
    return [
        models.flat(2),
        models.flat(3),
        models.perturbed_metric(2),
        models.pendulum(2),
        models.magnetic(2),
        models.randers(2),
        models.heart(0.7),
        HamiltonianModel("exp(0.2*q1*q2)*(p1^2 + 2*p2^2)/2 + 0.1*sin(q2)*p1 - 1/2", 2, "mixed"),
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def level_point(H, q, direction):
    """Point of H = 0 over ``q`` on the ray from p = 0 through ``direction``."""
    from scipy.optimize import brentq
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d)
    q = np.asarray(q, float)
    f = lambda s: H.value(np.concatenate([q, s * d]))
    s = brentq(f, 1e-3, 10.0, xtol=1e-15)
    return np.concatenate([q, s * d])


# ------------------------------------------------------- acceptance report

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        note = getattr(item, "criterion_note", "")
        prev = _CRITERIA.get(num)
        if prev is None or prev[1] == "PASS":
            _CRITERIA[num] = (title, status, note)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, status, note = _CRITERIA[num]
        line = f"criterion {num:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{note}]" if note else ""))
