import numpy as np
import pytest

from batchaipw.data import BINARY, Dataset

# pass/fail lines recorded by the acceptance module, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_dataset(X, z, y=None, r=None, ids=None, C=None, mode=BINARY):
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    ids = np.arange(n) if ids is None else ids
    if r is None:
        r = np.zeros(n, bool) if y is None else np.ones(n, bool)
    r = np.asarray(r, bool)
    y = np.full(n, np.nan) if y is None else np.where(r, np.asarray(y, float), np.nan)
    return Dataset(ids, X, z, r, y, C, mode)


@pytest.fixture
def linear_data():
    """400 fully annotated units with a linear outcome and logistic treatment."""
    rng = np.random.default_rng(123)
    n = 400
    X = rng.standard_normal((n, 3))
    e = 1 / (1 + np.exp(-(0.3 + X[:, 0])))
    z = (rng.random(n) < e).astype(float)
    y = 1 + X @ np.array([1.0, -0.5, 0.2]) + 2 * z + rng.standard_normal(n) * (1 + 0.5 * z)
    return make_dataset(X, z, y)
