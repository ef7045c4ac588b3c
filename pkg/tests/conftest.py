import numpy as np
import pytest

from riaftbart.data import make_dataset
from riaftbart.simulate import DgpConfig, simulate


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def het_small():
    """Small three-arm heterogeneity dataset and its truth."""
    cfg = DgpConfig(K=3, n_k=40, mode="heterogeneity", censoring=0.3)
    ds, truth = simulate(cfg, seed=11)
    return cfg, ds, truth


@pytest.fixture(scope="session")
def vs_small():
    cfg = DgpConfig(K=4, n_k=50, mode="varselect")
    ds, truth = simulate(cfg, seed=5)
    return cfg, ds, truth


@pytest.fixture
def toy_ds():
    """Six rows, two clusters, one continuous and one three-level covariate."""
    X = np.array([[0.5, 0], [1.5, 1], [-0.2, 2], [0.1, 0], [2.0, 1], [0.7, 2]])
    return make_dataset(y=[1.0, 2.5, 0.7, 3.1, 1.2, 0.4], delta=[1, 0, 1, 1, 0, 1],
                        cluster=[1, 1, 1, 2, 2, 2], X=X, column_names=["age", "o2"],
                        is_categorical=[False, True], codebooks={"o2": ["room", "cannula", "mask"]})
