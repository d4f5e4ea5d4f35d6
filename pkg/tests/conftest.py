import os
from pathlib import Path

import numpy as np
import pytest

from magdrop_lab import data
from magdrop_lab.nn import Conv2D, Dense, Flatten, ModelSpec, ReLU, SoftmaxCrossEntropy

DATA_DIR = Path(__file__).parent / "data"

# (criterion, verdict, detail) lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")


@pytest.fixture
def mlp_small():
    return ModelSpec((784,), [Dense(784, 16), ReLU(), Dense(16, 10), SoftmaxCrossEntropy()], seed=3)


@pytest.fixture
def cnn_small():
    return ModelSpec((2, 7, 7), [Conv2D(2, 3, 3, 2), ReLU(), Conv2D(3, 4, 2, 1), ReLU(), Flatten(),
                                 Dense(16, 5), ReLU(), Dense(5, 3), SoftmaxCrossEntropy()], seed=5)


@pytest.fixture(scope="session")
def mnist_root(tmp_path_factory):
    """Data root holding MNIST IDX files: $MAGDROP_DATA if populated, else a desk split."""
    env = os.environ.get(data.DATA_ROOT_ENV)
    if env and all(Path(p).exists() for p in data.mnist_paths(env, "train") + data.mnist_paths(env, "test")):
        return Path(env)
    root = tmp_path_factory.mktemp("mnist")
    data.prepare_mnist_desk(root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
