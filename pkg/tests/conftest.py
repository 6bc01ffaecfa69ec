import pytest

from partgen.config import TrainConfig
from partgen.pipeline import train_stage1, train_stage2
from partgen.synthetic import synthesize_dataset

TINY_CFG = TrainConfig(class_id="boxchair", seed=3, point_budget=64, batch_size=16,
                       stage1_epochs=15, stage2_epochs=12, recache_interval=6,
                       n_noise_candidates=4, deterministic=False)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthesize_dataset(seed=21, n_shapes=16, n_points=64)


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset):
    """A briefly trained model: cheap, deterministic, structurally complete."""
    res1 = train_stage1(tiny_dataset, TINY_CFG)
    res2 = train_stage2(tiny_dataset, res1.model, TINY_CFG)
    return res2.model, res1.history, res2.history
