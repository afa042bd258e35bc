import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_masks(count, max_side=8, labels=3, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        H, W = rng.integers(1, max_side + 1, size=2)
        yield rng.integers(0, labels, size=(H, W))
