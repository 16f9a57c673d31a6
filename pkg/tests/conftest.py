import sys
from pathlib import Path

# flat layout: the modules live at the repository root
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from noise import make_rng  # noqa: E402
from operators import observe, partition_rows  # noqa: E402


@pytest.fixture
def rng():
    return make_rng(20240611)


def well_conditioned(rows, cols, seed, spread=0.1):
    """I-like matrix plus a small random perturbation; full column rank."""
    g = make_rng(seed).standard_normal((rows, cols))
    a = spread * g / np.sqrt(rows)
    a[:cols] += np.eye(cols)
    return a


@pytest.fixture
def hilbert_problem():
    """20 x 10 consistent system in 5 blocks, with its exact solution."""
    a = well_conditioned(20, 10, seed=7)
    x_true = make_rng(8).standard_normal(10)
    op = partition_rows(a, 5)
    return op, observe(op, a @ x_true), x_true
