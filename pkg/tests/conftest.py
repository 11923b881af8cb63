import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")

np.seterr(over="raise", invalid="raise", divide="raise")

ACCEPTANCE = []


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", help="run multi-hour training criteria")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    reason = "multi-hour run; pass --run-slow to enable"
    skip = pytest.mark.skip(reason=reason)
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)
            label = item.get_closest_marker("criterion")
            if label is not None:
                ACCEPTANCE.append((label.args[0], None, reason))


@pytest.fixture
def record_criterion():
    """Collect one pass/fail line per acceptance criterion for the terminal summary."""
    def record(label, passed, detail=""):
        ACCEPTANCE.append((label, passed, detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[passed]
        terminalreporter.write_line(f"{status:8s} {label}  {detail}")
