import os
import sys
from pathlib import Path

os.environ.setdefault("SNNERGY_DEBUG", "1")
sys.path.insert(0, str(Path(__file__).parent))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from snnergy.tensor import using_tape  # noqa: E402


@pytest.fixture(autouse=True)
def fresh_tape():
    with using_tape() as tape:
        yield tape


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
