"""Tests for core/data.py: ingestion, synthetic data, partitioning, alignment."""
from __future__ import annotations

import numpy as np
import pytest

from core.data import (
    RawDataset,
    even_split,
    load_tabular,
    partition_vertical,
    split_aligned,
    split_test,
    standardize,
    synth_dataset,
    write_tabular,
)
from core.errors import ConfigError, IngestionError, SchemaError, SpecError


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

class TestLoadTabular:
    def test_reads_features_labels_ids(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,a,b,label\nr1,1.0,2.0,0\nr2,3.0,4.0,1\n", encoding="utf-8")
        ds = load_tabular(path, "label", "id", standardized=False)
        assert ds.features.tolist() == [[1.0, 2.0], [3.0, 4.0]]
        assert ds.labels.tolist() == [0, 1]
        assert ds.ids.tolist() == ["r1", "r2"]
        assert ds.num_classes == 2

    def test_standardized_by_default(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,a,label\n1,1.0,0\n2,3.0,1\n3,5.0,1\n", encoding="utf-8")
        ds = load_tabular(path, "label", "id")
        assert np.allclose(ds.features.mean(axis=0), 0.0)
        assert np.allclose(ds.features.std(axis=0), 1.0)

    def test_missing_value_names_row_and_column(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,a,b,label\n1,1.0,2.0,0\n2,,4.0,1\n", encoding="utf-8")
        with pytest.raises(IngestionError, match=r"row 2.*'a'"):
            load_tabular(path, "label", "id")

    def test_missing_label_column(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,a\n1,1.0\n", encoding="utf-8")
        with pytest.raises(SchemaError):
            load_tabular(path, "label", "id")

    def test_duplicate_ids(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("id,a,label\n1,1.0,0\n1,2.0,1\n", encoding="utf-8")
        with pytest.raises(SchemaError):
            load_tabular(path, "label", "id")

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError):
            load_tabular(tmp_path / "nope.csv", "label", "id")

    def test_write_then_load_keeps_values(self, tmp_path):
        ds = synth_dataset(3, [5, 5, 5], 4, 2.0, seed=1)
        path = tmp_path / "out.csv"
        write_tabular(ds, path)
        back = load_tabular(path, "label", "id", num_classes=3, standardized=False)
        assert np.allclose(back.features, ds.features, rtol=0.0, atol=1e-12)
        assert np.array_equal(back.labels, ds.labels)


# ---------------------------------------------------------------------------
# Synthetic data and splits
# ---------------------------------------------------------------------------

class TestSynthDataset:
    def test_counts_and_determinism(self):
        a = synth_dataset(4, [10, 20, 30, 40], 8, 3.0, seed=7)
        b = synth_dataset(4, [10, 20, 30, 40], 8, 3.0, seed=7)
        assert np.bincount(a.labels).tolist() == [10, 20, 30, 40]
        assert np.array_equal(a.features, b.features)

    def test_class_means_are_separated(self):
        ds = synth_dataset(2, [4000, 4000], 4, 4.0, seed=0)
        m0 = ds.features[ds.labels == 0].mean(axis=0)
        m1 = ds.features[ds.labels == 1].mean(axis=0)
        assert np.linalg.norm(m0 - m1) == pytest.approx(4.0, abs=0.15)

    def test_more_classes_than_features(self):
        ds = synth_dataset(5, [3] * 5, 2, 2.0, seed=0)
        assert ds.features.shape == (15, 2)

    def test_one_feature_is_config_error(self):
        with pytest.raises(ConfigError):
            synth_dataset(2, [5, 5], 1, 2.0, seed=0)


class TestSplitTest:
    def test_stratified(self):
        ds = synth_dataset(2, [100, 50], 3, 2.0, seed=0)
        train, test = split_test(ds, 0.2, seed=0)
        assert np.bincount(test.labels).tolist() == [20, 10]
        assert train.num_rows + test.num_rows == 150
        assert not set(train.ids.tolist()) & set(test.ids.tolist())

    def test_standardize_uses_train_statistics(self):
        ds = synth_dataset(2, [50, 50], 3, 2.0, seed=0)
        train, test = split_test(ds, 0.2, seed=0)
        std_train, std_test = standardize(train, test)
        assert np.allclose(std_train.features.mean(axis=0), 0.0)
        mean, std = train.features.mean(axis=0), train.features.std(axis=0)
        assert np.allclose(std_test.features, (test.features - mean) / std)


# ---------------------------------------------------------------------------
# Vertical partition
# ---------------------------------------------------------------------------

class TestPartitionVertical:
    def _ds(self, d=10):
        return RawDataset(np.arange(2 * d, dtype=float).reshape(2, d), np.array([0, 1]), np.array([0, 1]), 2)

    def test_even_split_gives_remainder_to_first_parties(self):
        assert [len(c) for c in even_split(10, 4)] == [3, 3, 2, 2]

    def test_blocks_cover_every_column(self):
        blocks = partition_vertical(self._ds(), 4)
        cols = sorted(c for b in blocks for c in b.columns)
        assert cols == list(range(10))
        assert [b.party_id for b in blocks] == [1, 2, 3, 4]

    def test_explicit_spec(self):
        blocks = partition_vertical(self._ds(4), 2, [[3, 0], [1, 2]])
        assert blocks[0].features[:, 0].tolist() == [3.0, 7.0]

    def test_overlapping_spec(self):
        with pytest.raises(SpecError):
            partition_vertical(self._ds(4), 2, [[0, 1], [1, 2, 3]])

    def test_missing_column(self):
        with pytest.raises(SpecError):
            partition_vertical(self._ds(4), 2, [[0], [1, 2]])

    def test_party_count_mismatch(self):
        with pytest.raises(SpecError):
            partition_vertical(self._ds(4), 3, [[0, 1], [2, 3]])


# ---------------------------------------------------------------------------
# Aligned / unaligned split
# ---------------------------------------------------------------------------

class TestSplitAligned:
    def test_pools_are_disjoint_and_complete(self):
        ds = synth_dataset(3, [40, 40, 40], 6, 3.0, seed=0)
        blocks = partition_vertical(ds, 3)
        sc = split_aligned(blocks, ds.labels, ds.ids, 0.1, seed=0, num_classes=3)
        aligned = set(sc.active.aligned_ids.tolist())
        pools = [set(p.unaligned_ids.tolist()) for p in sc.parties]
        assert len(aligned) == 12
        assert all(not aligned & pool for pool in pools)
        assert not pools[0] & pools[1] and not pools[1] & pools[2]
        assert len(aligned) + sum(len(p) for p in pools) == 120

    def test_only_active_party_holds_labels(self):
        ds = synth_dataset(3, [40, 40, 40], 6, 3.0, seed=0)
        sc = split_aligned(partition_vertical(ds, 3), ds.labels, ds.ids, 0.1, seed=0, num_classes=3)
        assert sc.active.is_active and sc.active.labels_aligned is not None
        assert all(p.labels_aligned is None for p in sc.parties[1:])

    def test_aligned_rows_share_order_across_parties(self):
        ds = synth_dataset(2, [30, 30], 4, 3.0, seed=2)
        sc = split_aligned(partition_vertical(ds, 2), ds.labels, ds.ids, 0.5, seed=2, num_classes=2)
        assert np.array_equal(sc.parties[0].aligned_ids, sc.parties[1].aligned_ids)

    def test_small_aligned_pool_warns(self):
        ds = synth_dataset(4, [10, 10, 10, 10], 4, 3.0, seed=0)
        with pytest.warns(UserWarning):
            split_aligned(partition_vertical(ds, 2), ds.labels, ds.ids, 0.05, seed=0, num_classes=4)
