import logging
from pathlib import Path

import pytest

DEMO = Path(__file__).resolve().parents[1] / "src" / "histkg" / "data" / "demo"
GOLDEN = Path(__file__).resolve().parent / "golden"


@pytest.fixture(autouse=True)
def _reset_histkg_logger():
    # the CLI detaches the package logger from the root; undo that for caplog
    yield
    logger = logging.getLogger("histkg")
    logger.handlers[:] = []
    logger.propagate = True
    logger.setLevel(logging.NOTSET)


@pytest.fixture
def demo_dir() -> Path:
    return DEMO


@pytest.fixture
def golden_dir() -> Path:
    return GOLDEN


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
