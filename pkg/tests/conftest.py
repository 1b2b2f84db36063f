"""Fixtures compartilhadas e a opção --runslow."""

import numpy as np
import pytest

from filters import upsample_nearest
from grid import Dataset, synth_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="roda os testes de aceitação marcados como slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    pular = pytest.mark.skip(reason="precisa de --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(pular)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_gaussian():
    """400 campos gaussianos 16×16, Δ=4 (grade LR 4×4)."""
    return synth_dataset(400, 16, 16, slope=-5.0 / 3.0, warp=0.0, seed=11, delta=4)


@pytest.fixture(scope="session")
def tiny_dataset():
    """24 campos 8×8, Δ=2 — o suficiente para treinar redes em segundos."""
    return synth_dataset(24, 8, 8, slope=-5.0 / 3.0, warp=0.0, seed=5, delta=2)


@pytest.fixture
def upsampled_dataset(rng):
    """Campos HR que são upsample de um LR: SF ≡ 0."""
    lr = rng.standard_normal((16, 2, 4, 4))
    return Dataset(samples=upsample_nearest(lr, 2).astype(np.float32), delta=2)
