import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_instance(rng, n, p, scale=0.5, design="normal"):
    """Standard normal design with intercept and logistic treatment draws."""
    x = rng.standard_normal((n, p))
    if design == "skewed":
        x = np.exp(0.5 * x)
        x = (x - x.mean(axis=0)) / x.std(axis=0, ddof=1)
    f = np.column_stack([np.ones(n), x])
    beta = rng.normal(0.0, scale, p + 1)
    t = (rng.random(n) < 1.0 / (1.0 + np.exp(-(f @ beta)))).astype(float)
    if t.min() == t.max():
        t[0] = 1.0 - t[0]
    return f, t


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
