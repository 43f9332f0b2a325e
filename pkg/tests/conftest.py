import numpy as np
import pytest

from featdrive.pipeline import Dataset
from featdrive.storage import create_synthetic_dataset


@pytest.fixture(scope="session")
def ds64(tmp_path_factory):
    """20k nodes, dim 64 (256-byte rows, two per sector)."""
    d = tmp_path_factory.mktemp("ds64")
    create_synthetic_dataset(20_000, 64, 10, 3, d)
    return Dataset(d)


@pytest.fixture(scope="session")
def ds128(tmp_path_factory):
    """10k nodes, dim 128 (sector-exact rows)."""
    d = tmp_path_factory.mktemp("ds128")
    create_synthetic_dataset(10_000, 128, 15, 5, d)
    return Dataset(d)


@pytest.fixture(scope="session")
def ds_odd(tmp_path_factory):
    """Rows of 100 floats (400 bytes) so rows straddle sectors irregularly."""
    d = tmp_path_factory.mktemp("ds_odd")
    create_synthetic_dataset(3_000, 100, 6, 11, d)
    return Dataset(d)


def rows_u8(table, nodes):
    return table.read_rows_sync(np.asarray(nodes)).view(np.uint8).reshape(len(nodes), -1)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
