import numpy as np
import pytest

from advseg.phantom import make_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Five 32x32x12 phantoms, four for training and one for validation."""
    out = tmp_path_factory.mktemp("phantoms")
    make_dataset(out, 5, seed=11, dims=(32, 32, 12), spacing=(1.5, 1.5, 3.0))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
