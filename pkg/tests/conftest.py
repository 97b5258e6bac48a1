from pathlib import Path

import numpy as np
import pytest
import torch

DATA = Path(__file__).parent / "data"

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def families_path():
    return DATA / "families.dat"


@pytest.fixture(scope="session")
def family_records(families_path):
    from propdiff.swissprot import read_swissprot

    return read_swissprot(families_path)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def ac_report():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(ac, ok, detail):
        line = f"{ac} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
