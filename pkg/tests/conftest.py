import numpy as np
import pytest

from rfgnn.config import EXAMPLE_DATASET_DIR
from rfgnn.models import BackboneConfig, BackboneKind, SyntheticParams, TrainConfig
from rfgnn.services.graphstore import MultiRelationGraph, generate_synthetic, load_dataset


def small_train_config(kind: BackboneKind = BackboneKind.GCN, **overrides) -> TrainConfig:
    """Tiny, fast training config for unit tests"""
    values = dict(
        alpha=0.8, beta=0.8, gamma=0.9, branches=3, epochs=5, lr=0.01,
        weight_decay=5e-4, dropout=0.5, master_seed=7,
        backbone=BackboneConfig(kind=kind, layers=2, hidden=8, out_dim=8, sgc_power=2),
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def example_graph() -> MultiRelationGraph:
    return load_dataset(EXAMPLE_DATASET_DIR)


@pytest.fixture
def small_synthetic() -> MultiRelationGraph:
    params = SyntheticParams(
        n=60, classes=2, p_in=0.15, p_out=0.02,
        informative_dims=4, redundant_dims=4, noise_dims=4,
        class_separation=2.0, relations=2, seed=3,
    )
    return generate_synthetic(params)


@pytest.fixture
def tiny_graph() -> MultiRelationGraph:
    """5-node path with a chord in a second relation"""
    features = np.arange(15, dtype=np.float64).reshape(5, 3) / 10.0
    return MultiRelationGraph(
        features=features,
        edges=(np.array([[0, 1], [1, 2], [2, 3], [3, 4]]), np.array([[0, 4]])),
        labels=np.array([0, 0, 1, 1, -1]),
        train=np.array([0, 2]),
        val=np.array([1]),
        test=np.array([3]),
    )
