import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {}


@pytest.fixture(scope="session")
def toy_system(tmp_path_factory):
    """Trained toy models; ``CORFSEP_TOY_DIR`` keeps them between runs."""
    from toy_system import build_toy_system

    root = os.environ.get("CORFSEP_TOY_DIR")
    return build_toy_system(Path(root) if root else tmp_path_factory.mktemp("toy"))


@pytest.fixture
def criterion():
    """Record a PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        CRITERIA[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
