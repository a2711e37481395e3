import numpy as np
import pytest

from bcdnet.data import make_synth_corpus
from bcdnet.tensor import set_deterministic


@pytest.fixture(autouse=True)
def _deterministic_mode():
    # every test starts and ends in the default deterministic mode
    set_deterministic(True)
    yield
    set_deterministic(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Shared synthetic corpus: 40 images per class, 50x50."""
    root = tmp_path_factory.mktemp("corpus")
    make_synth_corpus(str(root), per_class=40, hw=50, seed=0)
    return str(root)
