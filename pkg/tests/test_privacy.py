"""Tests for core/privacy.py: noise injection and the label-inference attack."""
from __future__ import annotations

import numpy as np
import pytest

from core.errors import DomainError
from core.privacy import NoiseConfig, inject_noise, label_inference_attack
from core.prototypes import PrototypeSet


class TestNoise:
    def test_zero_kappa_returns_input(self, rng):
        m = rng.standard_normal((4, 3))
        assert inject_noise(m, NoiseConfig(0.0, "representations"), 1, 2) is m

    def test_target_off_returns_input(self, rng):
        m = rng.standard_normal((4, 3))
        assert inject_noise(m, NoiseConfig(0.5, "off"), 1) is m

    def test_same_keys_same_noise(self, rng):
        m = rng.standard_normal((5, 2))
        cfg = NoiseConfig(0.3, "prototypes", seed=9)
        assert np.array_equal(inject_noise(m, cfg, 1, 2, 1), inject_noise(m, cfg, 1, 2, 1))
        assert not np.array_equal(inject_noise(m, cfg, 1, 2, 1), inject_noise(m, cfg, 2, 2, 1))

    def test_noise_scale(self):
        noisy = inject_noise(np.zeros((1000, 1000)), NoiseConfig(0.1, "representations", seed=3), 1)
        assert 0.0995 <= float(noisy.std()) <= 0.1005
        assert abs(float(noisy.mean())) < 1e-3

    def test_negative_kappa(self):
        with pytest.raises(DomainError):
            NoiseConfig(-0.1, "representations")

    def test_applies_to(self):
        cfg = NoiseConfig(0.1, "prototypes")
        assert cfg.applies_to("prototypes")
        assert not cfg.applies_to("representations")
        assert not NoiseConfig(0.0, "prototypes").applies_to("prototypes")


class TestLabelInferenceAttack:
    def test_class_means_are_recovered(self, rng):
        protos = PrototypeSet(2, np.eye(3, 4) * 2.0)
        labels = rng.integers(0, 3, size=300)
        reps = protos.prototypes[labels] + 0.05 * rng.standard_normal((300, 4))
        assert label_inference_attack(reps, protos, labels) >= 0.95

    def test_single_sample_on_its_prototype(self):
        protos = PrototypeSet(2, np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert label_inference_attack(np.array([[0.0, 3.0]]), protos, np.array([1])) == 1.0

    def test_wrong_prototypes_fail(self):
        protos = PrototypeSet(3, np.array([[0.0, 1.0], [1.0, 0.0]]))
        reps = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert label_inference_attack(reps, protos, np.array([0, 1])) == 0.0

    def test_no_rows(self):
        assert label_inference_attack(np.zeros((0, 2)), PrototypeSet(2, np.eye(2)), np.array([], dtype=int)) == 0.0

    def test_unrelated_prototypes_sit_at_chance(self):
        rng = np.random.default_rng(31)
        z, d = 4, 6
        means = rng.standard_normal((z, d)) * 3
        labels = rng.integers(0, z, size=400)
        reps = means[labels] + rng.standard_normal((400, d))
        scores = [
            label_inference_attack(reps, PrototypeSet(2, rng.standard_normal((z, d))), labels) for _ in range(400)
        ]
        assert abs(float(np.mean(scores)) - 1.0 / z) < 0.04
