import numpy as np
import pytest

from rdpc.hankel import Dataset

A2 = np.array([[0.9535, 0.0761], [-0.8454, 0.5478]])
B2 = np.array([0.0465, 0.8454])
C2 = np.array([1.0, 0.0])


def rollout(x, u, w):
    """Plain state-space rollout of the second-order plant, used as oracle."""
    ys = []
    for uk, wk in zip(u, w):
        ys.append(C2 @ x)
        x = A2 @ x + B2 * uk + B2 * wk
    return np.array(ys), x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def lti_dataset(rng):
    """Noise-free 60-sample dataset of the second-order plant."""
    T = 60
    u = rng.uniform(-10, 10, T)
    w = rng.uniform(-1, 1, T)
    y, _ = rollout(np.zeros(2), u, w)
    return Dataset(u, w, y, T)


def random_dataset(rng, T, n_u=1, n_w=1, n_y=1):
    return Dataset(rng.normal(size=(T, n_u)), rng.normal(size=(T, n_w)), rng.normal(size=(T, n_y)), T)


# one summary line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


@pytest.fixture
def report():
    def _report(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        else:
            terminalreporter.write_line(f"ACCEPTANCE {n}: NOT RUN")
