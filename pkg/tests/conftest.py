import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


class ScriptedOracle:
    """Returns a fixed sequence of replies (the last one repeats)."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = 0

    def query(self, image, prompt=""):
        from scaleinject.oracle import OracleResponse

        i = min(self.calls, len(self.replies) - 1)
        self.calls += 1
        reply = self.replies[i]
        if isinstance(reply, Exception):
            raise reply
        success, conf, label = reply
        return OracleResponse(conf, label, success, f"{label}\nconfidence: {conf}")


@pytest.fixture
def scripted():
    return ScriptedOracle


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
