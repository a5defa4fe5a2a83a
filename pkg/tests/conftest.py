import time

import numpy as np
import pytest

from seulab.campaign import CampaignConfig, CampaignRunner, CampaignTarget
from seulab.checkpoint import Block, Layer, Matrix, TensorSelector
from seulab.model import DiffuserConfig, ToyDiffuser, build_weights


def pytest_configure(config):
    config._session_start = time.perf_counter()


TINY = DiffuserConfig(
    latent_size=8,
    image_size=32,
    channels=(8, 16),
    steps=3,
    text_length=4,
    embed_width=16,
    seed=11,
)


@pytest.fixture(scope="session")
def tiny_config():
    return TINY


@pytest.fixture(scope="session")
def tiny_store(tiny_config):
    return build_weights(tiny_config)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return ToyDiffuser(tiny_config)


@pytest.fixture(scope="session")
def default_config():
    return DiffuserConfig(seed=5)


@pytest.fixture(scope="session")
def default_store(default_config):
    return build_weights(default_config)


@pytest.fixture(scope="session")
def default_model(default_config):
    return ToyDiffuser(default_config)


def make_tiny_campaign(trials=2, prompts=("a parked sports car", "a teapot"), seed=3,
                       targets=None):
    targets = targets or (
        CampaignTarget(TensorSelector(Block.DOWN, 0, 0, Layer.SA, Matrix.WV), bit=14),
    )
    return CampaignConfig(
        model=TINY, targets=tuple(targets), prompts=tuple(prompts), trials=trials, seed=seed
    )


@pytest.fixture()
def tiny_campaign_result(tiny_store):
    cfg = make_tiny_campaign()
    runner = CampaignRunner(cfg, store=tiny_store)
    return runner.run_campaign()


def assert_images_equal(a: np.ndarray, b: np.ndarray):
    assert a.shape == b.shape
    assert np.array_equal(a, b)
