import numpy as np
import pytest

from ostta_lab.model import TinyModel, pretrain
from ostta_lab.stream import StreamConfig, clean_training_set


@pytest.fixture(scope="session")
def default_stream_cfg():
    return StreamConfig()


@pytest.fixture(scope="session")
def pretrained_model(default_stream_cfg):
    """The default pretrained backbone, shared read-only across tests.

    Tests that adapt must clone it."""
    cfg = default_stream_cfg
    model = TinyModel.create(d_in=cfg.d_in, n_classes=cfg.K, seed=cfg.seed)
    log = pretrain(model, clean_training_set(cfg, 64))
    assert log[-1]["accuracy"] >= 0.95
    return model


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
