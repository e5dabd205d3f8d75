import numpy as np
import pytest

from cbfmeta.features import NetSpec
from cbfmeta.meta import MetaConfig, meta_train


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    """A small but usable trained checkpoint for control and CLI tests."""
    cfg = MetaConfig(
        n_iterations=400,
        tasks_per_iteration=4,
        seed=5,
        net=NetSpec(hidden=(64, 64), output_dim=16),
        max_anchors_per_task=24,
        learning_rate=3e-3,
        lr_schedule="cosine",
        lambda0_init=0.01,
        sigma=0.005,
    )
    result = meta_train(cfg)
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    result.checkpoint.save(path)
    return result.checkpoint, path


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
