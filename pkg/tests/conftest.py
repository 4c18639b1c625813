import numpy as np
import pytest
import torch

from mimo_unet import ArchConfig, build_model


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # keep results reproducible on shared runners
    torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    return ArchConfig(in_channels=2, base_channels=8, depth=2,
                      num_subnetworks=2, seed=123)


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
