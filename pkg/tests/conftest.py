import warnings

import pytest

from qpdiff import DegenerateActiveSetWarning

ACCEPTANCE_LINES = []


@pytest.fixture(autouse=True)
def _quiet_degenerate_rows():
    # tests that care about this warning use pytest.warns explicitly
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateActiveSetWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
