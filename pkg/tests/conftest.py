import numpy as np
import pytest
import torch

from outpainter import RunConfig, StubBackend, prepare_dataset, train
from outpainter.pipeline import load_pairs, make_synthetic_pairs

torch.set_num_threads(1)


def random_image(rng, h=32, w=32):
    return rng.random((h, w, 3), dtype=np.float64).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_config():
    return RunConfig(train_steps=40, batch_size=8)


@pytest.fixture(scope="session")
def pairs_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("pairs")
    make_synthetic_pairs(path, 6, size=32, seed=9)
    return path


@pytest.fixture(scope="session")
def record_store(tmp_path_factory, pairs_dir):
    store = tmp_path_factory.mktemp("store")
    prepare_dataset(load_pairs(pairs_dir), 4, StubBackend(), store)
    return store


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, record_store, toy_config):
    """A session-wide trained checkpoint for expansion and CLI tests."""
    out = tmp_path_factory.mktemp("run")
    checkpoint = train(record_store, out, toy_config)
    return {"out": out, "checkpoint": checkpoint, "config": toy_config}
