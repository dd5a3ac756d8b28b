import logging

import pytest

from helpers import random_model


@pytest.fixture(autouse=True)
def _quiet_candidate_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="pmuopt.measurements")


@pytest.fixture(scope="session")
def model10():
    return random_model(10, seed=3)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
