import numpy as np
import pytest

from echodistill.data_model import DatasetDir
from echodistill.phantom import write_phantom_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Six train, two val and three test phantoms at 32x32, 32 frames."""
    root = tmp_path_factory.mktemp("phantoms")
    manifest, params = write_phantom_dataset(root, 6, 2, 3, T=32, H=32, W=32, seed=3)
    return DatasetDir(root), manifest, params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
