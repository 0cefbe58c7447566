"""Tests for core/metrics.py: MID, WCS, accuracy and recall."""
from __future__ import annotations

import math

import numpy as np
import pytest

from core.errors import DomainError
from core.metrics import accuracy, class_counts, mid, per_class_recall, wcs


class TestMid:
    def test_balanced_is_exactly_zero(self):
        assert mid([50, 50, 50, 50]) == 0.0

    def test_single_class_is_one(self):
        assert mid([0, 120, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_between_zero_and_one(self):
        value = mid([900, 50, 50])
        assert 0.0 < value < 1.0

    def test_more_skew_is_larger(self):
        assert mid([100, 10]) > mid([100, 50])

    def test_one_class_is_domain_error(self):
        with pytest.raises(DomainError):
            mid([10])

    def test_empty_is_domain_error(self):
        with pytest.raises(DomainError):
            mid([0, 0, 0])


class TestWcs:
    def test_proportional_parties_score_one(self):
        global_counts = [300, 150, 60]
        parties = [[100, 50, 20], [200, 100, 40]]
        assert wcs(global_counts, parties) == pytest.approx(1.0, abs=1e-9)

    def test_disjoint_two_party_case(self):
        assert wcs([40, 40], [[40, 0], [0, 40]]) == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-9)

    def test_empty_party_has_zero_weight(self):
        assert wcs([10, 10], [[10, 10], [0, 0]]) == pytest.approx(1.0)

    def test_empty_global_is_domain_error(self):
        with pytest.raises(DomainError):
            wcs([0, 0], [[0, 0]])


class TestScores:
    def test_accuracy(self):
        assert accuracy(np.array([0, 1, 2, 2]), np.array([0, 1, 1, 2])) == 0.75

    def test_accuracy_of_nothing(self):
        assert accuracy(np.array([]), np.array([])) == 0.0

    def test_per_class_recall_marks_absent_classes(self):
        recall = per_class_recall(np.array([0, 0, 1]), np.array([0, 1, 1]), 3)
        assert recall == [1.0, 0.5, None]

    def test_class_counts(self):
        assert class_counts(np.array([0, 2, 2]), 4).tolist() == [1, 0, 2, 0]
