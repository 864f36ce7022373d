import pathlib

import numpy as np
import pytest

from hiergrid.acpf import solve_powerflow
from hiergrid.netcase import Branch, Bus, GenDynParams, Generator, Load, NetworkCase, builtin_case

DATA = pathlib.Path(__file__).parent / "data"


def two_bus(p=0.0, q=0.0, x=0.1, r=0.0, b=0.0, flex=0.0):
    dyn = GenDynParams(M=2 * 5.0 / (2 * np.pi * 60))
    buses = (Bus(1, "slack"), Bus(2, "PQ"))
    gens = (Generator(1, 0.0, 0.0, -10, 10, -10, 10, 1.0, dyn),)
    loads = (Load(2, p, q, p - flex * abs(p), p + flex * abs(p), q - flex * abs(q), q + flex * abs(q)),) if (p or q) else ()
    return NetworkCase(100.0, buses, (Branch(1, 2, r, x, b),), gens, loads)


@pytest.fixture(scope="session")
def case9():
    return builtin_case("case9")


@pytest.fixture(scope="session")
def case39():
    return builtin_case("case39")


@pytest.fixture(scope="session")
def op9(case9):
    return solve_powerflow(case9)


@pytest.fixture(scope="session")
def op39(case39):
    return solve_powerflow(case39)


ACCEPTANCE: dict[tuple[int, str], str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
