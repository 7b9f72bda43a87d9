import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("pmp", deadline=None, max_examples=100, derandomize=True)
settings.load_profile("pmp")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance report
# Tests marked ``criterion(n)`` feed a one-line-per-criterion summary printed
# after the run. Details recorded through the ``report`` fixture are appended.

_CRITERIA: dict[int, dict] = {}

CRITERION_TITLES = {
    1: "gradient integrity",
    2: "transport correctness",
    3: "toy completion convergence",
    4: "PMD regularization effect",
    5: "invariant suite",
    6: "dense/up-sampling contract",
    7: "determinism",
    8: "ablation harness",
}


def _entry(n):
    return _CRITERIA.setdefault(n, {"outcomes": [], "notes": []})


@pytest.fixture
def report(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is None:
        raise RuntimeError("the report fixture needs a criterion marker")
    return _entry(marker.args[0])["notes"].append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _entry(marker.args[0])["outcomes"].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        ok = bool(e["outcomes"]) and all(e["outcomes"])
        notes = "; ".join(e["notes"])
        line = f"criterion {n} ({CRITERION_TITLES.get(n, '?')}): {'PASS' if ok else 'FAIL'}"
        terminalreporter.write_line(line + (f" | {notes}" if notes else ""))
