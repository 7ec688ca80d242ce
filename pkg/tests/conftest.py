"""Shared fixtures: a small synthetic corpus and a desk-scale config."""

from __future__ import annotations

import pytest
import torch

from mcitr import feature_store
from mcitr.config import load_config

SMALL = {
    "n_images": 8,
    "K": 6,
    "d_i": 10,
    "d_t": 8,
    "d_ic": 5,
    "d_latent": 4,
    "seed": 7,
    "val_images": 4,
    "test_images": 5,
    "max_length": 7,
}

SMALL_OVERRIDES = {
    "data.K": "6",
    "data.dims.dI": "10",
    "data.dims.dT": "8",
    "data.dims.dIc": "5",
    "data.dims.dJ": "12",
    "data.max_length": "7",
    "model.pool.n_max_img": "6",
    "model.pool.n_max_txt": "7",
    "model.pool.d_t": "4",
    "model.pool.h": "8",
    "train.batch_size": "4",
    "train.epochs": "2",
    "train.lr_decay_last_epochs": "1",
    "moco.queue_size": "8",
}


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    feature_store.make_synthetic_corpus(root, **SMALL)
    return root


@pytest.fixture
def small_config(small_corpus):
    overrides = dict(SMALL_OVERRIDES)
    overrides["data.root"] = str(small_corpus)
    return load_config(overrides=overrides)


@pytest.fixture(autouse=True)
def _reset_torch_state():
    torch.manual_seed(0)
    yield
    torch.use_deterministic_algorithms(False)
