"""Dataset ingestion, vertical partitioning and aligned/unaligned splitting.

Pipeline order used by the experiment runner::

    load_tabular / synth_dataset      -> RawDataset
    split_test (stratified)           -> train, test
    standardize(train, test)          -> stats fitted on train only
    partition_vertical(train, M, spec)-> FeatureBlock per party
    split_aligned(blocks, ratio, seed)-> Scenario (PartyDataset per party)

Party 1 is the active party and the only one that keeps aligned labels.
Each party's unaligned pool is a disjoint slice of the non-aligned rows, so
unaligned ids never overlap between parties.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from core.errors import ConfigError, DomainError, IngestionError, SchemaError, ShapeError, SpecError
from core.numerics import rng_for

logger = logging.getLogger(__name__)

ACTIVE_PARTY = 1
VARIANCE_FLOOR = 1e-12

# rng stream ids
_STREAM_SYNTH = 11
_STREAM_TEST = 12
_STREAM_ALIGN = 13
_STREAM_ROTATE = 14


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RawDataset:
    features: np.ndarray    # (N, D)
    labels: np.ndarray      # (N,) ints in [0, Z)
    ids: np.ndarray         # (N,) unique
    num_classes: int

    def __post_init__(self) -> None:
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise ShapeError(
                f"features has {n} rows but labels/ids have {self.labels.shape}/{self.ids.shape}"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise SchemaError(f"labels must lie in [0, {self.num_classes})")

    @property
    def num_rows(self) -> int:
        return int(self.features.shape[0])

    def subset(self, index: np.ndarray) -> "RawDataset":
        return RawDataset(self.features[index], self.labels[index], self.ids[index], self.num_classes)


@dataclass(frozen=True)
class FeatureBlock:
    party_id: int
    columns: tuple[int, ...]
    features: np.ndarray    # (N, D^m)


@dataclass(frozen=True)
class PartyDataset:
    party_id: int
    aligned: np.ndarray             # (N_a, D^m), row k <-> aligned_ids[k]
    aligned_ids: np.ndarray
    unaligned: np.ndarray           # (N_u^m, D^m)
    unaligned_ids: np.ndarray
    columns: tuple[int, ...] = ()
    labels_aligned: np.ndarray | None = None   # active party only

    @property
    def is_active(self) -> bool:
        return self.party_id == ACTIVE_PARTY

    @property
    def num_rows(self) -> int:
        return int(self.aligned.shape[0] + self.unaligned.shape[0])


@dataclass(frozen=True)
class Scenario:
    """Training-side view of one federation plus the evaluator's oracle labels.

    ``aligned_labels``, ``unaligned_labels`` and ``full_train`` never reach party
    code. They exist for scenario transforms, metrics and upper-boundary
    training.
    """

    parties: tuple[PartyDataset, ...]
    aligned_labels: np.ndarray
    unaligned_labels: dict[int, np.ndarray]
    num_classes: int
    test: RawDataset | None = None
    test_blocks: tuple[FeatureBlock, ...] = ()
    full_train: RawDataset | None = None
    meta: dict = field(default_factory=dict)

    @property
    def active(self) -> PartyDataset:
        return self.parties[0]

    def party(self, party_id: int) -> PartyDataset:
        return self.parties[party_id - 1]


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def standardize(train: RawDataset, *others: RawDataset) -> tuple[RawDataset, ...]:
    """Zero-mean / unit-variance columns using statistics from ``train`` only."""
    mean = train.features.mean(axis=0) if train.num_rows else np.zeros(train.features.shape[1])
    std = train.features.std(axis=0) if train.num_rows else np.ones(train.features.shape[1])
    std = np.where(std * std < VARIANCE_FLOOR, 1.0, std)

    def _apply(ds: RawDataset) -> RawDataset:
        return replace(ds, features=(ds.features - mean) / std)

    return tuple(_apply(ds) for ds in (train, *others))


def load_tabular(
    path: str | Path,
    label_column: str,
    id_column: str,
    num_classes: int | None = None,
    standardized: bool = True,
) -> RawDataset:
    """Read a UTF-8 CSV with a header row into a ``RawDataset``.

    Every column other than the id and label columns is a numeric feature.
    With ``standardized`` the columns are standardized over all rows; the
    experiment runner loads raw and standardizes on its training split.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")
    try:
        frame = pd.read_csv(path, encoding="utf-8", dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise IngestionError(f"could not parse {path}: {exc}") from exc

    for col in (label_column, id_column):
        if col not in frame.columns:
            raise SchemaError(f"column {col!r} missing from {path}")
    feature_cols = [c for c in frame.columns if c not in (label_column, id_column)]
    if not feature_cols:
        raise SchemaError(f"{path} has no feature columns")

    features = np.empty((len(frame), len(feature_cols)), dtype=np.float64)
    for j, col in enumerate(feature_cols):
        numeric = pd.to_numeric(frame[col].str.strip(), errors="coerce")
        bad = numeric.isna() | ~np.isfinite(numeric.to_numpy(dtype=np.float64, na_value=np.nan))
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise IngestionError(
                f"missing or non-numeric value at row {row + 1}, column {col!r} in {path}"
            )
        features[:, j] = numeric.to_numpy(dtype=np.float64)

    raw_labels = pd.to_numeric(frame[label_column].str.strip(), errors="coerce")
    label_values = raw_labels.to_numpy(dtype=np.float64, na_value=np.nan)
    if np.isnan(label_values).any() or not np.all(label_values == np.round(label_values)):
        row = int(np.flatnonzero(np.isnan(label_values) | (label_values != np.round(label_values)))[0])
        raise SchemaError(f"non-integer label at row {row + 1} in {path}")
    labels = label_values.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise SchemaError(f"negative label in {path}")

    ids = frame[id_column].to_numpy()
    if len(set(ids.tolist())) != len(ids):
        raise SchemaError(f"duplicate ids in column {id_column!r} of {path}")
    z = num_classes if num_classes is not None else (int(labels.max()) + 1 if labels.size else 2)

    ds = RawDataset(features, labels, ids, max(z, 2))
    logger.info(
        "Tabular dataset loaded",
        extra={"path": str(path), "rows": ds.num_rows, "features": features.shape[1], "classes": ds.num_classes},
    )
    return standardize(ds)[0] if standardized else ds


def write_tabular(dataset: RawDataset, path: str | Path, label_column: str = "label", id_column: str = "id") -> None:
    """Write a dataset in the layout ``load_tabular`` reads back."""
    frame = pd.DataFrame(
        dataset.features, columns=[f"x{j}" for j in range(dataset.features.shape[1])]
    )
    frame.insert(0, id_column, dataset.ids)
    frame[label_column] = dataset.labels
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")


def synth_dataset(
    num_classes: int,
    per_class_counts: Sequence[int],
    num_features: int,
    class_separation: float,
    seed: int,
) -> RawDataset:
    """Gaussian clusters (unit covariance) with class means ``class_separation`` apart.

    For Z <= D the means are the scaled basis vectors sep/sqrt(2) * e_z
    (pairwise distance exactly sep) under a seeded random rotation, so class
    information is spread over every column.  For Z > D random means are
    rescaled until the closest pair is exactly sep apart.
    """
    if num_features < 2:
        raise ConfigError([f"synthetic data needs D >= 2, got {num_features}"])
    if num_classes < 2:
        raise DomainError(f"synthetic data needs Z >= 2, got {num_classes}")
    if len(per_class_counts) != num_classes or any(c < 0 for c in per_class_counts):
        raise DomainError("per_class_counts must list one nonnegative count per class")

    rng = rng_for(seed, _STREAM_SYNTH)
    if num_classes <= num_features:
        means = np.zeros((num_classes, num_features))
        means[np.arange(num_classes), np.arange(num_classes)] = class_separation / np.sqrt(2.0)
        q, r = np.linalg.qr(rng_for(seed, _STREAM_ROTATE).standard_normal((num_features, num_features)))
        rotation = q * np.sign(np.diag(r))
        means = means @ rotation
    else:
        raw = rng.standard_normal((num_classes, num_features))
        diffs = raw[:, None, :] - raw[None, :, :]
        dist = np.linalg.norm(diffs, axis=2)
        closest = dist[np.triu_indices(num_classes, 1)].min()
        means = raw * (class_separation / closest) if closest > 0 else raw * 0.0

    blocks, labels = [], []
    for z, count in enumerate(per_class_counts):
        blocks.append(means[z] + rng.standard_normal((int(count), num_features)))
        labels.append(np.full(int(count), z, dtype=np.int64))
    features = np.vstack(blocks) if blocks else np.zeros((0, num_features))
    label_arr = np.concatenate(labels)
    order = rng.permutation(len(label_arr))
    return RawDataset(features[order], label_arr[order], np.arange(len(label_arr)), num_classes)


def split_test(dataset: RawDataset, test_ratio: float, seed: int) -> tuple[RawDataset, RawDataset]:
    """Stratified hold-out: round(test_ratio * n_z) rows of every class go to test."""
    if not 0.0 <= test_ratio < 1.0:
        raise DomainError(f"test_ratio must be in [0, 1), got {test_ratio}")
    rng = rng_for(seed, _STREAM_TEST)
    test_idx: list[np.ndarray] = []
    for z in range(dataset.num_classes):
        rows = np.flatnonzero(dataset.labels == z)
        take = int(round(test_ratio * len(rows)))
        test_idx.append(rng.permutation(rows)[:take])
    test_mask = np.zeros(dataset.num_rows, dtype=bool)
    if test_idx:
        test_mask[np.concatenate(test_idx).astype(np.int64)] = True
    return dataset.subset(np.flatnonzero(~test_mask)), dataset.subset(np.flatnonzero(test_mask))


# ---------------------------------------------------------------------------
# Vertical partition
# ---------------------------------------------------------------------------

def even_split(num_features: int, num_parties: int) -> list[list[int]]:
    """Contiguous column blocks; earlier parties take the remainder columns."""
    bounds = np.array_split(np.arange(num_features), num_parties)
    return [b.tolist() for b in bounds]


def partition_vertical(
    dataset: RawDataset, num_parties: int, split_spec: Sequence[Sequence[int]] | None = None
) -> list[FeatureBlock]:
    d = dataset.features.shape[1]
    if num_parties < 1:
        raise SpecError(f"need at least one party, got {num_parties}")
    spec = [list(cols) for cols in split_spec] if split_spec is not None else even_split(d, num_parties)
    if len(spec) != num_parties:
        raise SpecError(f"split spec lists {len(spec)} parties, expected {num_parties}")
    seen: dict[int, int] = {}
    for m, cols in enumerate(spec, start=1):
        for c in cols:
            if not 0 <= c < d:
                raise SpecError(f"party {m} references column {c} outside [0, {d})")
            if c in seen:
                raise SpecError(f"column {c} assigned to both party {seen[c]} and party {m}")
            seen[c] = m
    missing = sorted(set(range(d)) - set(seen))
    if missing:
        raise SpecError(f"columns {missing} are not assigned to any party")
    return [
        FeatureBlock(m, tuple(cols), dataset.features[:, cols])
        for m, cols in enumerate(spec, start=1)
    ]


# ---------------------------------------------------------------------------
# Aligned / unaligned split
# ---------------------------------------------------------------------------

def split_aligned(
    blocks: Sequence[FeatureBlock],
    labels: np.ndarray,
    ids: np.ndarray,
    aligned_ratio: float,
    seed: int,
    num_classes: int,
) -> Scenario:
    """Pick round(ratio * N) shared aligned rows; deal the rest out as unaligned pools."""
    if not 0.0 < aligned_ratio <= 1.0:
        raise DomainError(f"aligned_ratio must be in (0, 1], got {aligned_ratio}")
    n = len(labels)
    num_parties = len(blocks)
    rng = rng_for(seed, _STREAM_ALIGN)
    order = rng.permutation(n)
    n_aligned = int(round(aligned_ratio * n))
    aligned_idx = np.sort(order[:n_aligned])
    rest = order[n_aligned:]
    pools = [np.sort(p) for p in np.array_split(rest, num_parties)]

    present = np.unique(labels[aligned_idx]).size
    if n_aligned < num_classes or present < num_classes:
        msg = f"aligned pool has {n_aligned} rows covering {present}/{num_classes} classes"
        warnings.warn(msg, stacklevel=2)
        logger.warning("Aligned pool misses classes", extra={"aligned_rows": n_aligned, "classes_present": present})

    parties = []
    for block, pool in zip(blocks, pools):
        parties.append(
            PartyDataset(
                party_id=block.party_id,
                aligned=block.features[aligned_idx],
                aligned_ids=ids[aligned_idx],
                unaligned=block.features[pool],
                unaligned_ids=ids[pool],
                columns=block.columns,
                labels_aligned=labels[aligned_idx] if block.party_id == ACTIVE_PARTY else None,
            )
        )
    return Scenario(
        parties=tuple(parties),
        aligned_labels=labels[aligned_idx],
        unaligned_labels={b.party_id: labels[p] for b, p in zip(blocks, pools)},
        num_classes=num_classes,
    )
