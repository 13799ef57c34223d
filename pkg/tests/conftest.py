from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from volcap.core import standard_camera  # noqa: E402
from volcap.synth_metrics import generate_scene, standard_scene  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def camera():
    return standard_camera()


@pytest.fixture(scope="session")
def standard_pairs(camera):
    return generate_scene(standard_scene(), camera)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
