"""Class priors: EM local estimate, global average, γ-mixed prior."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from core.errors import DegeneratePriorError, DomainError
from core.prototypes import PrototypeSet, plan_to_prototypes

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class PriorVector:
    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise DomainError(f"prior must be a nonempty vector, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0.0):
            raise DomainError("prior entries must be finite and nonnegative")
        if abs(float(p.sum()) - 1.0) > SIMPLEX_TOL:
            raise DegeneratePriorError(f"prior sums to {p.sum()!r}, not 1")
        object.__setattr__(self, "probs", p)

    @property
    def num_classes(self) -> int:
        return int(self.probs.size)

    @classmethod
    def normalized(cls, weights: Sequence[float] | np.ndarray) -> "PriorVector":
        w = np.asarray(weights, dtype=np.float64)
        total = float(w.sum())
        if total <= 0.0:
            raise DegeneratePriorError("cannot normalize a prior with no mass")
        return cls(w / total)

    @classmethod
    def uniform(cls, num_classes: int) -> "PriorVector":
        return init_prior(num_classes)


@dataclass(frozen=True)
class GammaParam:
    value: float
    source_counts: tuple[int, ...]


def init_prior(num_classes: int) -> PriorVector:
    if num_classes < 2:
        raise DomainError(f"need Z >= 2, got {num_classes}")
    return PriorVector(np.full(num_classes, 1.0 / num_classes))


def estimate_local_prior(batch_reps: np.ndarray, protos: PrototypeSet, prev_prior: PriorVector) -> PriorVector:
    """One EM step: average the f->μ plan rows computed under ``prev_prior``."""
    if np.asarray(batch_reps).shape[0] == 0:
        raise DomainError("prior estimate needs a nonempty batch")
    plan = plan_to_prototypes(protos, prev_prior, batch_reps)
    return PriorVector.normalized(plan.matrix.mean(axis=0))


def iterate_local_prior(
    batch_reps: np.ndarray,
    protos: PrototypeSet,
    start: PriorVector,
    iterations: int,
    tol: float = 0.0,
) -> list[PriorVector]:
    """Repeated ``estimate_local_prior``; returns every iterate including ``start``."""
    history = [start]
    for i in range(iterations):
        nxt = estimate_local_prior(batch_reps, protos, history[-1])
        history.append(nxt)
        moved = 0.5 * float(np.abs(nxt.probs - history[-2].probs).sum())
        logger.debug("EM iteration", extra={"iteration": i + 1, "tv_step": moved})
        if moved <= tol:
            break
    return history


def average_global_prior(local_priors: Sequence[PriorVector]) -> PriorVector:
    if not local_priors:
        raise DomainError("cannot average an empty list of priors")
    sizes = {p.num_classes for p in local_priors}
    if len(sizes) != 1:
        raise DomainError(f"priors disagree on Z: {sorted(sizes)}")
    total = np.zeros(local_priors[0].num_classes)
    for p in local_priors:
        total = total + p.probs
    return PriorVector.normalized(total / len(local_priors))


def compute_gamma(pseudo_label_counts: Sequence[int]) -> GammaParam:
    """γ = smallest class count over all Z classes / total (0 when a class is absent)."""
    counts = tuple(int(c) for c in pseudo_label_counts)
    total = sum(counts)
    if total <= 0:
        raise DomainError("gamma needs at least one counted sample")
    return GammaParam(value=min(counts) / total, source_counts=counts)


def mix_prior(local: PriorVector, global_prior: PriorVector, gamma: float) -> PriorVector:
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must be in [0, 1], got {gamma}")
    if local.num_classes != global_prior.num_classes:
        raise DomainError("local and global priors disagree on Z")
    if gamma == 0.0:
        return local
    if gamma == 1.0:
        return global_prior
    return PriorVector.normalized(gamma * global_prior.probs + (1.0 - gamma) * local.probs)


def total_variation(a: PriorVector, b: PriorVector) -> float:
    return 0.5 * float(np.abs(a.probs - b.probs).sum())
