import os
from pathlib import Path

import numpy as np
import pytest

from tradi.data import data_dir

ACCEPTANCE_LINES = []


def record_acceptance(number, title, status, detail):
    """Collect one line per acceptance criterion for the terminal summary."""
    line = f"[{status}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def data_root():
    return data_dir()


def has_mnist(root=None):
    root = Path(root or data_dir()) / "mnist"
    return all((root / f).exists() or (root / (f + ".gz")).exists()
               for f in ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                         "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))


@pytest.fixture(autouse=True)
def _isolated_data_dir(monkeypatch, tmp_path_factory):
    # Tests must not pick up a stray ./data directory unless TRADI_DATA_DIR is set on purpose.
    if "TRADI_DATA_DIR" not in os.environ:
        monkeypatch.setenv("TRADI_DATA_DIR", str(tmp_path_factory.getbasetemp() / "no-data"))
