import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from heinfer.calibration import calibrate  # noqa: E402
from heinfer.fixtures import FIXTURE_NAMES, build_fixture  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def fixtures():
    return {n: build_fixture(n, 0) for n in FIXTURE_NAMES}


@pytest.fixture(scope="session")
def calibrated(fixtures):
    return {n: calibrate(f.graph, f.calibration) for n, f in fixtures.items()}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
