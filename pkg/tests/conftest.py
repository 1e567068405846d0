import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, d, jitter=0.5):
    a = rng.standard_normal((d, d))
    return a @ a.T + jitter * np.eye(d)


# --- acceptance reporting ----------------------------------------------------
# Tests tagged ``@pytest.mark.criterion("C<n>")`` contribute to one summary
# line per criterion; ``record_criterion`` attaches the measured numbers.

_criteria = {}


def _entry(cid):
    return _criteria.setdefault(cid, {"outcomes": [], "details": []})


@pytest.fixture
def record_criterion(request):
    marker = request.node.get_closest_marker("criterion")

    def record(detail):
        _entry(marker.args[0])["details"].append(detail)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        entry = _entry(marker.args[0])
        entry["outcomes"].append(rep.outcome)
        if rep.skipped and isinstance(rep.longrepr, tuple):
            entry["details"].append(rep.longrepr[2].removeprefix("Skipped: "))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: int(c[1:])):
        e = _criteria[cid]
        if "failed" in e["outcomes"]:
            status = "FAIL"
        elif e["outcomes"] and all(o == "skipped" for o in e["outcomes"]):
            status = "SKIP"
        else:
            status = "PASS"
        detail = "; ".join(e["details"]) or "-"
        terminalreporter.write_line(f"{cid} {status}: {detail}")
