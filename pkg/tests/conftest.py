import numpy as np
import pytest

from nfprecond.fields import ActivationKind, NetworkSpec, init_params, forward
from nfprecond.tasks import mse_loss


def quadratic(A):
    """L(theta) = 1/2 theta^T A theta as a traced loss."""
    A = np.asarray(A, dtype=np.float64)
    return lambda th: 0.5 * (th * (A @ th)).sum()


def small_net(kind="gaussian", hidden=(6, 5), n_in=1, n_out=1, seed=0, n=12, **act):
    spec = NetworkSpec(n_in, hidden, n_out, ActivationKind(kind, **act))
    rng = np.random.default_rng(seed + 100)
    X = rng.uniform(-1, 1, (n, n_in))
    Y = rng.uniform(-1, 1, (n, n_out))
    theta = init_params(spec, seed).flat
    # non-zero biases so every term of the Hessian is exercised
    theta = theta + 0.1 * rng.standard_normal(theta.size)
    def loss(th):
        return mse_loss(forward(spec, th, X), Y)
    loss.X, loss.Y = X, Y
    return spec, theta, loss


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria register a one-line verdict here; printed after the run
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
