import numpy as np
import pytest
import torch

from tsrecourse.gvar import GvarTrainConfig, frozen_linear, train_gvar
from tsrecourse.series import MultivariateSeries, apply_standardizer, fit_standardizer
from tsrecourse.synthgen import LinearSystemParams, gen_linear

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def linear_params():
    return LinearSystemParams.sample(3)


@pytest.fixture(scope="session")
def linear_data(linear_params):
    return gen_linear(linear_params, 12_000)


@pytest.fixture(scope="session")
def true_gvar(linear_params):
    A = linear_params.matrix()
    z = np.zeros_like(A)
    return frozen_linear([A, z, z, z])


@pytest.fixture(scope="session")
def standardized(linear_data):
    stats = fit_standardizer(linear_data.series)
    return stats, apply_standardizer(linear_data.series, stats).values


@pytest.fixture(scope="session")
def trained_gvar(standardized):
    _, values = standardized
    return train_gvar(MultivariateSeries(values[:10_000]), GvarTrainConfig(epochs=6, seed=0))
