import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402
from lossgranger.data import Dataset, write_csv  # noqa: E402
from lossgranger.nn import PredictiveModel  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return PredictiveModel.create(5, 3, hidden=(8, 6), seed=7)


@pytest.fixture
def blobs():
    """Two linearly separable Gaussian blobs in 2-d, 200 samples."""
    g = np.random.default_rng(5)
    X = np.vstack([g.normal(-2.0, 0.6, size=(100, 2)), g.normal(2.0, 0.6, size=(100, 2))])
    y = np.repeat([0, 1], 100)
    return Dataset(X, y, ["x0", "x1"], 2)


def digits_dataset() -> Dataset:
    """UCI handwritten digits (8x8 = 64 features), pixel intensities scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    dg = load_digits()
    return Dataset(dg.data / 16.0, dg.target, [f"px{i}" for i in range(64)], 10)


@pytest.fixture(scope="session")
def digits_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("digits") / "digits.csv"
    write_csv(digits_dataset(), path)
    return path


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
