from pathlib import Path

import numpy as np
import pytest

import qcafqmc
from qcafqmc.hamio import read_fcidump

DATA = Path(qcafqmc.__file__).parent / "data"
H4_FCI = -1.9695121652


@pytest.fixture(scope="session")
def h4():
    return read_fcidump(DATA / "h4_sto3g.fcidump")


@pytest.fixture(scope="session")
def h2():
    return read_fcidump(DATA / "h2_sto3g.fcidump")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
