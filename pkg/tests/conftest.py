import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from services.datagen import make_blobs  # noqa: E402
from services.models import Batch, ModelSpec  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_blobs():
    # 4 classes x 10 rows in 3 dims
    return make_blobs(num_classes=4, dim=3, per_class=10, spread=0.5, seed=7)


@pytest.fixture
def quad_spec():
    return ModelSpec(kind="quadratic", input_dim=1)


@pytest.fixture
def origin_batch():
    """f(w) = 1/2 ||w||^2 as the quadratic objective of a single all-zero row."""
    return Batch(np.zeros((1, 1)), np.zeros(1, dtype=np.int64))


@pytest.fixture
def db_path(tmp_path):
    from db import init_db

    path = str(tmp_path / "runs.db")
    init_db(path)
    return path


def small_config_dict(**overrides):
    """Tiny blobs experiment that runs in well under a second."""
    raw = {
        "name": "tiny",
        "seed": 3,
        "N": 4,
        "M": 2,
        "T": 3,
        "model": {"kind": "linear-softmax", "input_dim": 3, "num_classes": 4},
        "data": {"source": "blobs", "num_classes": 4, "dim": 3, "per_class": 8, "spread": 0.5,
                 "partitioner": "iid"},
        "client": {"eta_c": 0.1, "K": 2, "batch_size": 4, "momentum": 0.0},
        "strategy": {"kind": "fedadavr", "optimizer": {"kind": "adagrad", "eta_s": 0.1}},
        "eval": {"pool": "holdout", "every": 1, "per_class": 5, "tail_fraction": 0.5},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return raw
