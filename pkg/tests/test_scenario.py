"""Tests for core/scenario.py: imbalance transforms, reports, manifests."""
from __future__ import annotations

import numpy as np
import pytest

from core.errors import DomainError, ScenarioError
from core.metrics import class_counts
from core.scenario import (
    ImbalanceSpec,
    RareClass,
    apply_imbalance,
    build_manifest,
    imbalance_report,
    load_manifest,
    manifest_report,
    save_manifest,
)
from tests.conftest import make_scenario


@pytest.fixture
def base_scenario():
    return make_scenario(num_classes=4, per_class=150, num_features=8, num_parties=2, aligned_ratio=0.1)


class TestApplyImbalance:
    def test_gamma_one_keeps_pools(self, base_scenario):
        out = apply_imbalance(base_scenario, ImbalanceSpec(gamma=1.0), seed=0)
        for before, after in zip(base_scenario.parties, out.parties):
            assert np.array_equal(before.unaligned_ids, after.unaligned_ids)

    def test_gamma_ratio_per_party(self, base_scenario):
        out = apply_imbalance(base_scenario, ImbalanceSpec(gamma=5.0), seed=0)
        majority = out.meta["majority_classes"]
        for party in out.parties:
            counts = class_counts(out.unaligned_labels[party.party_id], 4)
            maj = majority[str(party.party_id)]
            n_maj = counts[maj]
            assert len(set(n_maj.tolist())) == 1
            minority = [z for z in range(4) if z not in maj]
            assert all(counts[z] == round(n_maj[0] / 5.0) for z in minority)

    def test_unaligned_labels_track_pools(self, base_scenario):
        out = apply_imbalance(base_scenario, ImbalanceSpec(gamma=3.0), seed=1)
        for party in out.parties:
            assert len(out.unaligned_labels[party.party_id]) == party.unaligned.shape[0]

    def test_zero_shot_removes_class_from_aligned(self, base_scenario):
        spec = ImbalanceSpec(rare_classes=(RareClass(2, "zero_shot"),))
        out = apply_imbalance(base_scenario, spec, seed=0)
        assert 2 not in out.aligned_labels.tolist()
        assert 2 in np.concatenate(list(out.unaligned_labels.values())).tolist()
        assert out.parties[1].aligned.shape[0] == len(out.aligned_labels)

    def test_few_shot_keeps_count(self, base_scenario):
        spec = ImbalanceSpec(rare_classes=(RareClass(1, "few_shot", keep_count=2),))
        out = apply_imbalance(base_scenario, spec, seed=0)
        assert int(np.sum(out.aligned_labels == 1)) == 2

    def test_few_shot_deficit(self, base_scenario):
        spec = ImbalanceSpec(rare_classes=(RareClass(1, "few_shot", keep_count=10_000),))
        with pytest.raises(ScenarioError) as info:
            apply_imbalance(base_scenario, spec, seed=0)
        assert 1 in info.value.deficit[1]

    def test_rare_class_out_of_range(self, base_scenario):
        with pytest.raises(DomainError):
            apply_imbalance(base_scenario, ImbalanceSpec(rare_classes=(RareClass(9, "zero_shot"),)), seed=0)

    def test_deterministic(self, base_scenario):
        a = apply_imbalance(base_scenario, ImbalanceSpec(gamma=4.0), seed=3)
        b = apply_imbalance(base_scenario, ImbalanceSpec(gamma=4.0), seed=3)
        assert all(np.array_equal(p.unaligned_ids, q.unaligned_ids) for p, q in zip(a.parties, b.parties))


class TestReports:
    def test_imbalance_raises_mid(self, base_scenario):
        balanced = imbalance_report(base_scenario)
        skewed = imbalance_report(apply_imbalance(base_scenario, ImbalanceSpec(gamma=10.0), seed=0))
        assert skewed.party_mid[1] > balanced.party_mid[1]
        assert 0.0 <= skewed.wcs <= 1.0 + 1e-12

    def test_manifest_round_trip(self, base_scenario, tmp_path):
        scenario = apply_imbalance(base_scenario, ImbalanceSpec(gamma=2.0), seed=0)
        path = tmp_path / "manifest.json"
        save_manifest(build_manifest(scenario, seed=0), path)
        report = manifest_report(load_manifest(path))
        direct = imbalance_report(scenario)
        assert report.mid == pytest.approx(direct.mid)
        assert report.wcs == pytest.approx(direct.wcs)
        assert report.per_party_counts == direct.per_party_counts

    def test_bad_manifest(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(DomainError):
            load_manifest(path)
