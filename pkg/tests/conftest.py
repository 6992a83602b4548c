import logging

import pytest
import torch

torch.set_num_threads(1)

# lines appended by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def _quiet_hints(caplog):
    logging.getLogger("surgtoy.tubemask").setLevel(logging.ERROR)
    yield
    logging.getLogger("surgtoy.tubemask").setLevel(logging.NOTSET)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
