import pytest

from reservoir_lab.config import load_config
from reservoir_lab.dynamics import make_dataset
from reservoir_lab.reservoir import EsnHyperparams, init_matrices
from reservoir_lab.utils import CACHE_ENV_VAR

# 37 LT of Lorenz data: the 12 LT train/val span, then test starts at 24 and 27 LT, the last
# one followed by a 10 LT horizon rollout
SMALL_DATASET = {"n_test_starts": 2, "transient_lt": 10.0}

TINY_OVERRIDES = [
    "n_ensemble=2",
    "strategies=[SSV,RV_c]",
    "optimizers=[GS,BO]",
    "reservoir.n_r=20",
    "optimizer.grid_shape=[2,2]",
    "optimizer.bo_start=[2,2]",
    "optimizer.bo_acquire=2",
    "optimizer.lattice_size=10",
    "optimizer.gp_restarts=2",
    "dataset.n_test_starts=2",
    "dataset.transient_lt=10.0",
    "test.n_starts=2",
]


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV_VAR, str(tmp_path / "cache"))


@pytest.fixture(scope="session")
def lorenz_dataset():
    return make_dataset("lorenz", "short", seed=0, **SMALL_DATASET)


@pytest.fixture
def small_hp():
    return EsnHyperparams(sigma_in=1.0, rho=0.5, beta_tik=1e-8, n_r=30, seed=1)


@pytest.fixture
def small_mats(small_hp):
    return init_matrices(small_hp, 3)


@pytest.fixture
def tiny_config(tmp_path):
    return load_config(overrides=TINY_OVERRIDES + [f"output_dir={tmp_path / 'out'}"])
