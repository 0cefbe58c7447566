"""Directional end-to-end checks on the standard synthetic scenario.

Slow: deselected by default.  Run with ``pytest -m acceptance``.
"""
from __future__ import annotations

import numpy as np
import pytest

from config import validate_config
from core.experiment import run_experiment

pytestmark = pytest.mark.acceptance

SEEDS = [0, 1, 2, 3, 4]


def standard_config(**overrides) -> dict:
    """M=4, Z=4, D=16, Γ=10, 2% aligned, ~5000 unaligned rows per party, T=30."""
    raw = {
        "dataset": {"source": "synth", "num_features": 16, "per_class": [6400] * 4},
        "seeds": SEEDS,
        "num_parties": 4,
        "aligned_ratio": 0.02,
        "imbalance": {"gamma": 10.0},
        "hyperparameters": {"rounds": 30},
    }
    raw.update(overrides)
    return raw


def test_proto_evfl_beats_vanilla_and_upper_bounds_both():
    report = run_experiment(validate_config(standard_config(compare_with=["vanilla_vfl", "upper_boundary"])))
    ours = report.summary["proto_evfl"].mean_accuracy
    vanilla = report.summary["vanilla_vfl"].mean_accuracy
    upper = report.summary["upper_boundary"].mean_accuracy
    assert ours > vanilla
    assert upper >= ours
    assert upper >= vanilla


def test_zero_shot_class():
    rare = {"gamma": 10.0, "rare_classes": [{"class_id": 3, "mode": "zero_shot"}]}
    softmax = run_experiment(validate_config(standard_config(imbalance=rare)))
    for seed in softmax.per_seed:
        assert seed.methods["proto_evfl"].unseen_class_recall == 0.0

    nearest = run_experiment(validate_config(standard_config(imbalance=rare, inference="prototype_nn")))
    assert nearest.summary["proto_evfl"].mean_unseen_recall > 0.2


def test_attack_accuracy_does_not_rise_with_prototype_noise():
    means = []
    for kappa in (0.0, 0.05, 0.2):
        raw = standard_config(attack=True, noise={"kappa": kappa, "target": "prototypes"})
        means.append(run_experiment(validate_config(raw)).summary["proto_evfl"].mean_attack)
    assert means[0] >= means[1] >= means[2]


def test_training_loss_mostly_decreases():
    report = run_experiment(validate_config(standard_config(seeds=[0])))
    curve = np.asarray(report.per_seed[0].methods["proto_evfl"].loss_curve)
    assert len(curve) == 30
    steps = np.diff(curve)
    assert np.mean(steps <= 0.0) >= 0.8
