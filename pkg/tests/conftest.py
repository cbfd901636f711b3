import numpy as np
import pytest

from sharpdiag.diffcore import Batch, MlpModel


def random_model_batch(seed, activation=None, n=None):
    rng = np.random.default_rng(seed)
    activation = activation or ("relu", "tanh")[seed % 2]
    dims = (int(rng.integers(2, 6)), int(rng.integers(2, 8)), int(rng.integers(2, 6)), 2)
    model = MlpModel.init(dims, activation, seed)
    model = model.with_params(model.params.values + 0.1 * rng.standard_normal(model.n_params))
    n = n or int(rng.integers(1, 17))
    batch = Batch(rng.standard_normal((n, dims[0])), rng.integers(0, 2, n))
    return model, batch


@pytest.fixture
def small_model():
    return MlpModel.init((3, 4, 2), "tanh", seed=7)


@pytest.fixture
def small_batch():
    rng = np.random.default_rng(3)
    return Batch(rng.standard_normal((8, 3)), np.array([0, 1, 0, 1, 1, 0, 0, 1]))


# acceptance criteria register one line each; printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
