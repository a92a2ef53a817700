import numpy as np
import pytest

from eelink import dgp
from eelink.rng import Purpose, StreamKey, derive_stream

# criterion id -> {"title", "checks": [(text, ok)], "outcomes": [str]}
ACCEPTANCE: dict = {}


class AcceptanceRecorder:
    def __init__(self, cid, title):
        self.entry = ACCEPTANCE.setdefault(cid, {"title": title, "checks": [], "outcomes": []})

    def check(self, label, value, lo=None, hi=None, *, fmt=".4g"):
        ok = (lo is None or value >= lo) and (hi is None or value <= hi)
        bounds = f"[{'-inf' if lo is None else lo}, {'inf' if hi is None else hi}]"
        self.entry["checks"].append((f"{label}={value:{fmt}} in {bounds}", ok))
        return ok

    def flag(self, label, ok):
        self.entry["checks"].append((label, bool(ok)))
        return bool(ok)


@pytest.fixture
def acceptance(request):
    marker = request.node.get_closest_marker("criterion")
    cid, title = marker.args
    return AcceptanceRecorder(cid, title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    cid, title = marker.args
    entry = ACCEPTANCE.setdefault(cid, {"title": title, "checks": [], "outcomes": []})
    entry["outcomes"].append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[cid]
        ok = entry["outcomes"] and all(o == "passed" for o in entry["outcomes"]) and all(c for _, c in entry["checks"])
        detail = "; ".join(text + ("" if c else " (FAIL)") for text, c in entry["checks"])
        terminalreporter.write_line(f"C{cid:<2} {'PASS' if ok else 'FAIL'}  {entry['title']}: {detail}")


def design_data(design, n, seed, replicate=0):
    return dgp.generate(design, n, derive_stream(StreamKey(seed, replicate, 0, Purpose.DATA)))


@pytest.fixture(scope="session")
def ipw_data():
    return design_data("ipw2", 400, 2024)[0]


@pytest.fixture(scope="session")
def gest_data():
    return design_data("gest6", 400, 2024)[0]


def rng_weights(n, seed):
    g = np.random.default_rng(seed).standard_exponential(n)
    return g / g.sum()
