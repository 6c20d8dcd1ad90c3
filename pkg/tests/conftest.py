import numpy as np
import pytest

from evomem.memory import Feedback, MemoryState, Policy, evolve


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def random_units(rng, n, dim):
    m = rng.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def fill_state(vectors, policy=Policy.EXPRAG, outcomes=None, **kw):
    """Memory with one Success (or given outcome) entry per vector."""
    state = MemoryState(policy, ingest_failures=True, **kw)
    for i, v in enumerate(vectors):
        fb = outcomes[i] if outcomes is not None else Feedback.success()
        state = evolve(state, f"task {i}", f"pred {i}", fb, v, step=i)
    return state


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary: one pass/fail line per criterion ----------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or report.failed:
        prev = _CRITERIA.get(number, (title, True))
        _CRITERIA[number] = (title, prev[1] and report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}")
