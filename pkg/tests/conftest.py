import json

import numpy as np
import pytest

from models.params import ModelDims
from phantoms.dataset import dataset_from_samples, generate_all, load_dataset, make_splits, save_dataset
from tensor.core import precision, set_debug
from training.trainer import train
from utils.config import RunConfig, config_hash

TINY_DIMS = ModelDims(n_queries=3, channels=4, heads=2, mlp_hidden=4, base_width=2)


@pytest.fixture(autouse=True)
def nan_guard():
    set_debug(True)
    yield
    set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dims():
    return TINY_DIMS


@pytest.fixture
def float64():
    with precision("float64"):
        yield


@pytest.fixture(scope="session")
def small_index():
    """Ten 16^3 easy phantoms: 4 train, 2 val, 4 test."""
    return make_splits(4, 2, 4, 0.5, base_seed=7, cfg="easy", extents=(16, 16, 16))


@pytest.fixture(scope="session")
def small_samples(small_index):
    return generate_all(small_index)


@pytest.fixture
def small_dataset(small_index, small_samples):
    return dataset_from_samples(small_index, dict(small_samples))


@pytest.fixture(scope="session")
def tiny_config():
    """Factory of RunConfig dicts for the tiny model on 16^3 phantoms."""
    return _tiny_run_config


def _tiny_run_config(**train_overrides):
    train_section = {"epochs": 2, "pretrain_epochs": 1, "freeze_epochs": 1, "batch_size": 2}
    train_section.update(train_overrides)
    return {
        "data": {"n_train": 4, "n_val": 2, "n_test": 4, "extents": [16, 16, 16], "base_seed": 7},
        "model": {"n_queries": 3, "channels": 4, "heads": 2, "mlp_hidden": 4, "base_width": 2},
        "train": train_section,
        "eval": {"bootstrap_replicas": 100, "permutation_replicas": 200, "negative_cohort_size": 3},
    }


@pytest.fixture(scope="session")
def trained(tmp_path_factory, small_index, small_samples):
    """The small dataset on disk plus finished tiny cimt and unet-s4c runs.

    Returns {"data": dir, "config": path, "cimt": run dir, "unet-s4c": run dir}.
    """
    root = tmp_path_factory.mktemp("trained")
    cfg = RunConfig.from_dict(_tiny_run_config())
    config_path = root / "run.json"
    config_path.write_text(json.dumps(cfg.to_dict()))
    data_dir = save_dataset(small_index, root / "data", config_hash=config_hash(cfg), samples=small_samples)
    dataset = load_dataset(data_dir)
    runs = {"data": data_dir, "config": config_path}
    for preset in ("cimt", "unet-s4c"):
        runs[preset] = root / preset
        train(preset, dataset, cfg, runs[preset], seed=0)
    return runs
