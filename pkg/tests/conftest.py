import hypothesis
import numpy as np
import pytest

from pgpforecast.kernels import Hyperparameters, kernel_matrix

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_hyper(rng, d):
    return Hyperparameters.from_values(
        signal_variance=float(rng.uniform(0.5, 2.0)),
        lengthscale=float(rng.uniform(0.5, 2.0) * np.sqrt(d)),
        noise_variance=float(rng.uniform(0.05, 0.5)),
    )


def joint_posterior(X, Y, h, u):
    """Brute-force GP posterior at u, conditioning on all rows of (X, Y) at once."""
    C = kernel_matrix(X, X, h) + h.noise_variance * np.eye(len(X))
    k = kernel_matrix(X, u, h)[:, 0]
    mean = k @ np.linalg.solve(C, Y)
    var = h.signal_variance - k @ np.linalg.solve(C, k)
    return mean, var


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
