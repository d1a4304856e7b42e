import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_box(rng, size=100.0, min_side=1e-3):
    x = np.sort(rng.uniform(0, size, 2))
    y = np.sort(rng.uniform(0, size, 2))
    x[1] = max(x[1], x[0] + min_side)
    y[1] = max(y[1], y[0] + min_side)
    return [x[0], y[0], x[1], y[1]]
