import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_support import RESULTS, DeskRuns  # noqa: E402


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk_runs"))


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number])
