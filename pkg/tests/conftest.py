import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from fbsvie.lattice import ScenarioTree  # noqa: E402

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def tree_factory():
    cache = {}

    def make(N, T=1.0):
        key = (N, T)
        if key not in cache:
            cache[key] = ScenarioTree.build(T, N)
        return cache[key]

    return make


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
