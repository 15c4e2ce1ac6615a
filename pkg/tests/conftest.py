import os

import numpy as np
import pytest
import torch

from fblnet.core import ModelConfig, TrainConfig, shape_plan
from fblnet.data import DatasetSpec, synth_generate

RUN_SLOW = os.environ.get("FBLNET_RUN_SLOW") == "1"


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason="set FBLNET_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(input_side=32, base_width=8, seed=0)


@pytest.fixture
def desk_cfg():
    return ModelConfig(input_side=64, base_width=16, seed=0)


@pytest.fixture
def tiny_plan(tiny_cfg):
    return shape_plan(tiny_cfg)


@pytest.fixture
def desk_plan(desk_cfg):
    return shape_plan(desk_cfg)


@pytest.fixture
def tiny_train_cfg():
    return TrainConfig(n_steps=2, batch_size=4, val_every=0, n_splits=5)


@pytest.fixture
def tiny_ds():
    return synth_generate(
        DatasetSpec(input_side=32, n_samples=8, clip_length=4, seed=0)
    )


@pytest.fixture
def tiny_val_ds():
    return synth_generate(
        DatasetSpec(
            input_side=32, split="val", n_val_samples=4, clip_length=4, seed=0
        )
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
