import sys
import time
from pathlib import Path

import pytest

from trainmpc import TrainParams, TractionCondition, bundled_scenario, demo_map, run_scenario
from trainmpc.refsolve import solve_route
from trainmpc.trackmpc import MpcConfig

sys.path.insert(0, str(Path(__file__).parent))

# Lines registered by the acceptance tests, printed after the run.
ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def track():
    return demo_map()


@pytest.fixture(scope="session")
def params():
    return TrainParams()


@pytest.fixture(scope="session")
def timed_refs(track, params):
    t0 = time.perf_counter()
    refs = solve_route(track, TractionCondition.GOOD, params)
    return refs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def good_refs(timed_refs):
    return timed_refs[0]


class _Runs:
    """Closed-loop scenario results, computed once per session."""

    def __init__(self, track, params, refs, ref_seconds):
        self.track, self.params, self.refs = track, params, refs
        self.ref_seconds = ref_seconds
        self.cache = {}
        self.elapsed = {}

    def __call__(self, name):
        if name not in self.cache:
            t0 = time.perf_counter()
            self.cache[name] = run_scenario(bundled_scenario(name), self.track, self.params,
                                            MpcConfig(), refs=self.refs)
            # reference solving is shared; charge it to every scenario
            self.elapsed[name] = time.perf_counter() - t0 + self.ref_seconds
        return self.cache[name]


@pytest.fixture(scope="session")
def scenario_runs(track, params, timed_refs):
    return _Runs(track, params, *timed_refs)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[2:])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
