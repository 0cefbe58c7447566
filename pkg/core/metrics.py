"""Imbalance metrics (MID, WCS) and classification scores."""
from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np

from core.errors import DomainError

logger = logging.getLogger(__name__)


def class_counts(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)[:num_classes]


def mid(class_counts: Sequence[int]) -> float:
    """Multi-class imbalance degree in [0, 1].

    MID = (1 / (N ln Z)) * sum_z n_z ln(Z n_z / N), with 0 ln 0 = 0.
    0 for perfectly balanced counts, 1 when a single class holds every row.
    """
    counts = [int(c) for c in class_counts]
    z = len(counts)
    if z < 2:
        raise DomainError(f"MID needs at least 2 classes, got {z}")
    if any(c < 0 for c in counts):
        raise DomainError("class counts must be nonnegative")
    n = sum(counts)
    if n == 0:
        raise DomainError("MID of an empty dataset")
    total = 0.0
    for c in counts:
        if c:
            total += c * math.log(z * c / n)
    value = total / (n * math.log(z))
    return min(1.0, max(0.0, value))


def wcs(global_counts: Sequence[int], per_party_counts: Sequence[Sequence[int]]) -> float:
    """Weighted cosine similarity between each party's label vector and the global one.

    sum_m (|l_m|_1 / |L|_1) * cos(L, l_m).  Empty parties get zero weight.
    """
    big_l = np.asarray(global_counts, dtype=np.float64)
    l1_total = float(np.sum(big_l))
    if l1_total <= 0.0:
        raise DomainError("WCS of an empty global label vector")
    l2_total = float(np.linalg.norm(big_l))
    score = 0.0
    for m, local in enumerate(per_party_counts):
        lm = np.asarray(local, dtype=np.float64)
        l1 = float(np.sum(lm))
        if l1 == 0.0:
            logger.debug("WCS skipping empty party", extra={"party_index": m})
            continue
        cosine = float(big_l @ lm) / (l2_total * float(np.linalg.norm(lm)))
        score += (l1 / l1_total) * cosine
    return score


# ---------------------------------------------------------------------------
# Classification scores
# ---------------------------------------------------------------------------

def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.asarray(predicted) == labels))


def per_class_recall(predicted: np.ndarray, labels: np.ndarray, num_classes: int) -> list[float | None]:
    """Recall per class; None for classes absent from ``labels``."""
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    out: list[float | None] = []
    for z in range(num_classes):
        mask = labels == z
        out.append(float(np.mean(predicted[mask] == z)) if mask.any() else None)
    return out
