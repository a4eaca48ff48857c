import numpy as np
import pytest

from missfuse.encoders import Batch
from missfuse.model import ModelConfig, ModelParams


def small_config(**overrides) -> ModelConfig:
    base = dict(dims=(3, 4, 5), num_classes=3, d_model=8, heads=2, precision="float64")
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(config: ModelConfig, n: int, rng: np.random.Generator, mask=None) -> Batch:
    M = config.num_modalities
    if mask is None:
        mask = rng.random((n, M)) < 0.5
        empty = ~mask.any(axis=1)
        mask[empty, rng.integers(0, M, empty.sum())] = True
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), (n, M)).copy()
    xs = [np.where(mask[:, [m]], rng.standard_normal((n, d)), 0.0) for m, d in enumerate(config.dims)]
    return Batch(xs, mask, rng.integers(0, config.num_classes, n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small():
    cfg = small_config()
    return cfg, ModelParams.init(cfg, 0)
