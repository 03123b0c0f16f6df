import numpy as np
import pytest

from rsl.data import SyntheticConfig, generate_synthetic_climate
from rsl.grid import make_grid


@pytest.fixture(scope="session")
def small_grid():
    return make_grid(32, 16)


@pytest.fixture(scope="session")
def small_store(tmp_path_factory, small_grid):
    """3 synthetic years on the 32x16 grid: 2 train + 1 validation."""
    out = tmp_path_factory.mktemp("data") / "store3y"
    return generate_synthetic_climate(
        SyntheticConfig(seed=1234, years=3, grid=small_grid), out)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260808)
