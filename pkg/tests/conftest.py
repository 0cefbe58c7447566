"""Shared pytest fixtures.

Scenarios here are tiny (a few hundred rows, 2-3 parties, d=4) so the
federation tests finish in seconds.  Every fixture is built from a fixed
seed; tests that need their own seed call the ``make_*`` helpers directly.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from core.data import Scenario, partition_vertical, split_aligned, split_test, standardize, synth_dataset
from core.federation import FedConfig


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def make_scenario(
    seed: int = 0,
    num_classes: int = 3,
    per_class: int = 80,
    num_features: int = 6,
    num_parties: int = 3,
    aligned_ratio: float = 0.25,
    separation: float = 4.0,
    test_ratio: float = 0.2,
) -> Scenario:
    ds = synth_dataset(num_classes, [per_class] * num_classes, num_features, separation, seed)
    train, test = split_test(ds, test_ratio, seed)
    train, test = standardize(train, test)
    blocks = partition_vertical(train, num_parties)
    scenario = split_aligned(blocks, train.labels, train.ids, aligned_ratio, seed, num_classes)
    return replace(
        scenario,
        test=test,
        test_blocks=tuple(partition_vertical(test, num_parties)),
        full_train=train,
    )


def make_fed_config(num_classes: int = 3, **overrides) -> FedConfig:
    base = dict(
        num_classes=num_classes,
        seed=0,
        rounds=2,
        local_epochs=1,
        head_epochs=2,
        batch_size=16,
        lr=0.05,
        head_lr=0.05,
        latent_dim=4,
        extractor_hidden=(8,),
        classifier_hidden=(8,),
        timeout=10.0,
    )
    base.update(overrides)
    return FedConfig(**base)


def synth_config(**overrides) -> dict:
    """Minimal raw experiment config over a small synthetic set."""
    raw = {
        "dataset": {"source": "synth", "num_features": 6, "per_class": [60, 60, 60]},
        "seeds": [0],
        "num_parties": 2,
        "aligned_ratio": 0.2,
        "hyperparameters": {
            "rounds": 1,
            "batch_size": 16,
            "latent_dim": 4,
            "extractor_hidden": [8],
            "classifier_hidden": [8],
        },
    }
    raw.update(overrides)
    return raw


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_scenario() -> Scenario:
    return make_scenario()


@pytest.fixture
def tiny_fed_config() -> FedConfig:
    return make_fed_config()
