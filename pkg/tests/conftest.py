import numpy as np
import pytest
import torch

from srstar.desk import make_desk_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    return make_desk_corpus(tmp_path_factory.mktemp("desk"), n=8, size=128, seed=7)


@pytest.fixture(scope="session")
def paired_root(tmp_path_factory):
    return make_desk_corpus(tmp_path_factory.mktemp("paired"), n=8, size=128, seed=8, real_lr=True)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
