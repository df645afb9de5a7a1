import numpy as np
import pytest

from csefsl.data import IID, partition, synth_dataset, train_test_split
from csefsl.split import build_mlp_arch


@pytest.fixture
def mlp_arch():
    return build_mlp_arch(8, 4)


@pytest.fixture
def synth_world():
    """Four Gaussian blobs in 8-d; 1000 train / 400 test; five IID clients of 200 samples."""
    full = synth_dataset(0, 1400, 8, 4, 5.0)
    train, test = train_test_split(full, 400, 0)
    shards = partition(train, IID(), 5, 0)
    return train, test, shards


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
