import numpy as np
import pytest
from hypothesis import settings

from qrtd.data import CovariatePath, Dataset, Subject

settings.register_profile("qrtd", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("qrtd")


def make_subject(y, delta, z=(1.0,), breakpoints=(0.0,), values=None):
    z = np.asarray(z, dtype=float)
    if values is None:
        values = [z] * len(breakpoints)
    return Subject(y, delta, CovariatePath(breakpoints, values), z)


@pytest.fixture
def four_obs():
    """(Y, delta) = (1,1), (2,0), (3,1), (4,0) with an intercept-only design."""
    return Dataset([make_subject(y, d) for y, d in [(1, 1), (2, 0), (3, 1), (4, 0)]])


@pytest.fixture
def dosage_path():
    return CovariatePath([0.0, 0.6, 0.9], [[1, 0, 0], [1, 0.8, 0], [1, 0, 1.1]])


@pytest.fixture(scope="session")
def sim_small():
    from qrtd.simulation import ScenarioConfig, generate

    data, truth = generate(ScenarioConfig(n=300, seed=11, target_censoring=0.2))
    return data, truth


# one summary line per acceptance criterion, printed whatever the capture mode
_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = dict(report.user_properties).get("measured", "")
        _CRITERIA[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _CRITERIA[name]
        k = name.split("_")[2]
        label = name.split("_", 3)[3].replace("_", " ")
        status = "PASS" if outcome == "passed" else outcome.upper()
        terminalreporter.write_line(f"criterion {k} {status}: {label}. {detail}")
