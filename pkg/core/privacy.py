"""Gaussian-noise privacy knob and the prototype-similarity label-inference attack."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from core.errors import DomainError
from core.metrics import accuracy
from core.numerics import rng_for, safe_unit_rows
from core.prototypes import PrototypeSet

logger = logging.getLogger(__name__)

NoiseTarget = Literal["representations", "prototypes", "off"]

_STREAM_NOISE = 51


@dataclass(frozen=True)
class NoiseConfig:
    kappa: float = 0.0
    target: NoiseTarget = "off"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kappa < 0.0:
            raise DomainError(f"noise scale must be >= 0, got {self.kappa}")

    @property
    def active(self) -> bool:
        return self.kappa > 0.0 and self.target != "off"

    def applies_to(self, target: NoiseTarget) -> bool:
        return self.active and self.target == target


def inject_noise(matrix: np.ndarray, cfg: NoiseConfig, *keys: int) -> np.ndarray:
    """matrix + κ·G with G standard Gaussian from (cfg.seed, *keys).

    Returns ``matrix`` itself when κ = 0 or the target is off.
    """
    if not cfg.active:
        return matrix
    m = np.asarray(matrix, dtype=np.float64)
    noise = rng_for(cfg.seed, _STREAM_NOISE, *keys).standard_normal(m.shape)
    return m + cfg.kappa * noise


def label_inference_attack(
    party_aligned_reps: np.ndarray, received_protos: PrototypeSet, true_labels: np.ndarray
) -> float:
    """Fraction of samples whose most cosine-similar prototype is their true class."""
    reps = np.asarray(party_aligned_reps, dtype=np.float64)
    if reps.shape[0] == 0:
        return 0.0
    sims = safe_unit_rows(reps) @ safe_unit_rows(received_protos.prototypes).T
    guesses = np.argmax(sims, axis=1)
    score = accuracy(guesses, true_labels)
    logger.debug(
        "Label inference attack",
        extra={"party_id": received_protos.owner_party, "rows": int(reps.shape[0]), "accuracy": score},
    )
    return score
