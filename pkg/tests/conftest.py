import numpy as np
import pytest

from bellcal.crm import CrmParams, simulate_dataset
from bellcal.mdp import TabularMDP, random_policy_table, random_tabular_mdp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_mdp(rng) -> TabularMDP:
    return random_tabular_mdp(rng, 6, 2, 0.8)


@pytest.fixture
def small_policy(rng):
    return random_policy_table(rng, 6, 2)


@pytest.fixture(scope="session")
def crm_params():
    return CrmParams()


@pytest.fixture(scope="session")
def crm_data(crm_params):
    return simulate_dataset(crm_params, 400, 24, seed=5)
