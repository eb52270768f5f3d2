"""Shared fixtures: small backbones, heads, suites and fast run configs."""

import numpy as np
import pytest

from continual_merge.bench import generate_suite
from continual_merge.config import RunConfig
from continual_merge.models import LabeledBatch, init_model, make_head


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return init_model([5, 6, 6, 4], seed=3)


@pytest.fixture
def small_head():
    return make_head(num_classes=3, dim=4, temperature=5.0, seed=7)


@pytest.fixture
def small_batch(rng):
    return LabeledBatch(rng.normal(size=(8, 5)), rng.integers(0, 3, size=8))


@pytest.fixture
def tiny_suite():
    return generate_suite(
        num_tasks=3, classes_per_task=2, input_dim=8, samples_per_class=30,
        margin=4.0, seed=5, test_per_class=20,
    )


@pytest.fixture
def fast_config():
    """Desk-scale config shrunk so a full run takes well under a second"""
    return RunConfig(
        num_tasks=3, classes_per_task=2, input_dim=8, train_per_class=30, test_per_class=20,
        suite_seed=5, hidden_width=8, finetune_steps=20, rank=2, subspace_k=2,
        tta_steps=5, batch_size=8, seeds_per_class=3,
    )
