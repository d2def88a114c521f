import copy
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils.run_config import load_config  # noqa: E402
from utils.synthgen import build_dataset  # noqa: E402

TINY_OVERRIDES = {
    "data": {
        "n_classes": 3,
        "n_freq": 8,
        "n_frames": 24,
        "n_strong": 4,
        "n_weak": 4,
        "n_unlabeled": 6,
        "n_validation": 4,
        "mean_events_per_clip": 2.0,
        "min_duration": 3,
        "max_duration": 8,
    },
    "encoder": {
        "n_freq": 8,
        "conv_channels": [4],
        "d_model": 8,
        "n_transformer_blocks": 1,
        "n_heads": 2,
        "n_bands": 2,
        "time_downsample": 4,
        "embed_dim": 8,
        "max_time_patches": 16,
    },
    "context": {"n_blocks": 1, "n_heads": 2, "max_distance": 8},
    "proto": {"n_prototypes": 4, "max_iters": 20},
    "mask": {"ratio": 0.5, "block": 4},
    "pretrain": {"iterations": 1, "epochs": 1, "batch_size": 4},
    "finetune": {"epochs": 2, "freeze_epochs": 1, "batch_size": 4, "rampup_epochs": 1},
    "eval": {"median_window": 3, "n_timelines": 2},
    "experiment": {
        "seeds": [0],
        "iterations": [0, 1],
        "protos": ["gmm"],
        "losses": ["prototype_bce"],
        "masks": [True],
    },
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_overrides():
    return copy.deepcopy(TINY_OVERRIDES)


@pytest.fixture
def tiny_config(tmp_path, tiny_overrides):
    tiny_overrides["out_dir"] = str(tmp_path / "run")
    return load_config(overrides=tiny_overrides)


@pytest.fixture
def tiny_dataset(tiny_config):
    """Dataset directory generated under the run's data/ folder."""
    data_dir = os.path.join(tiny_config.out_dir, "data")
    build_dataset(tiny_config.data, tiny_config.data_seed, data_dir)
    return data_dir
