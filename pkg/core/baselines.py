"""Reference systems: Local Model, Vanilla VFL, Upper Boundary.

They share the numerics stack and ``FedConfig`` hyperparameters so a paired
comparison changes only the method.  Each baseline trains for
``rounds`` times an epoch budget over its labeled rows: the head budget
(``head_epochs``) for the aligned-only systems, ``local_epochs`` for the
upper boundary, which sees every training row.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from core.aggregation import HeadParams, cross_entropy, head_loss, head_step, init_head, predict_softmax
from core.data import PartyDataset, Scenario
from core.errors import ConfigError
from core.federation import FedConfig, batch_schedule, head_batch_keys, init_extractor
from core.numerics import (
    MlpParams,
    anchored_backward,
    anchored_forward,
    init_mlp,
    mlp_backward,
    mlp_forward,
    normalize_rows,
    normalize_rows_backward,
    rng_for,
    sgd_step,
)
from workers.party import represent

logger = logging.getLogger(__name__)

BaselineKind = Literal["local", "vanilla_vfl", "upper_boundary"]
BASELINE_KINDS: tuple[BaselineKind, ...] = ("local", "vanilla_vfl", "upper_boundary")

_STREAM_CENTRAL_INIT = 91
_STREAM_CENTRAL_BATCH = 92


# ---------------------------------------------------------------------------
# Centralized classifier (local model and upper boundary)
# ---------------------------------------------------------------------------

def init_classifier(input_dim: int, cfg: FedConfig) -> MlpParams:
    """Extractor-shaped trunk followed by the MLP-3 head, as one network."""
    hidden = [*cfg.extractor_hidden, cfg.latent_dim, *cfg.classifier_hidden]
    dims = [input_dim, *hidden, cfg.num_classes]
    acts = ["relu"] * len(hidden) + ["identity"]
    return init_mlp(dims, acts, rng_for(cfg.seed, _STREAM_CENTRAL_INIT))


def train_classifier(
    features: np.ndarray, labels: np.ndarray | None, cfg: FedConfig, epochs_per_round: int | None = None
) -> MlpParams:
    if labels is None or len(labels) == 0:
        raise ConfigError(["no labeled rows to train on"])
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    params = init_classifier(x.shape[1], cfg)
    per_round = cfg.local_epochs if epochs_per_round is None else epochs_per_round
    for epoch in range(cfg.rounds * per_round):
        for idx in batch_schedule(cfg.seed, (_STREAM_CENTRAL_BATCH, epoch), len(y), cfg.batch_size):
            logits, tape = mlp_forward(params, x[idx])
            _, d_logits = cross_entropy(logits, y[idx])
            grads, _ = mlp_backward(params, tape, d_logits)
            params = sgd_step(params, grads, cfg.head_lr)
    return params


def predict_classifier(params: MlpParams, features: np.ndarray) -> np.ndarray:
    logits, _ = mlp_forward(params, features)
    return np.argmax(logits, axis=1)


def train_local(active_party_data: PartyDataset, cfg: FedConfig) -> MlpParams:
    """Active party alone: its own block, aligned labeled rows only."""
    return train_classifier(active_party_data.aligned, active_party_data.labels_aligned, cfg, cfg.head_epochs)


def train_upper_boundary(features: np.ndarray, labels: np.ndarray, cfg: FedConfig) -> MlpParams:
    """Centralized oracle: every training row, every column, every label."""
    return train_classifier(features, labels, cfg)


def upper_boundary_rows(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Full-feature rows for the aligned pool plus every party's unaligned pool."""
    full = scenario.full_train
    if full is None:
        raise ConfigError(["scenario carries no full training matrix"])
    position = {key: i for i, key in enumerate(full.ids.tolist())}
    wanted = list(scenario.active.aligned_ids.tolist())
    for p in scenario.parties:
        wanted.extend(p.unaligned_ids.tolist())
    idx = np.array([position[i] for i in wanted], dtype=np.int64)
    return full.features[idx], full.labels[idx]


# ---------------------------------------------------------------------------
# Vanilla VFL
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VanillaModel:
    extractors: tuple[MlpParams, ...]
    head: HeadParams


def train_vanilla_vfl(parties: Sequence[PartyDataset], cfg: FedConfig) -> VanillaModel:
    """Plain 1/M concatenation head; extractors trained end to end in-process.

    Uses the same initial parameters and head batch order as the federated
    run, so with η = 0 and no unaligned data the two agree.
    """
    active = parties[0]
    labels = active.labels_aligned
    if labels is None or len(labels) == 0:
        raise ConfigError(["vanilla VFL needs labeled aligned rows"])
    extractors = [init_extractor(p.aligned.shape[1], cfg, p.party_id) for p in parties]
    head = init_head(len(parties), cfg.latent_dim, cfg.num_classes, cfg.classifier_hidden, cfg.seed)

    for round_ in range(1, cfg.rounds + 1):
        for epoch in range(cfg.head_epochs):
            for idx in batch_schedule(cfg.seed, head_batch_keys(round_, epoch), len(labels), cfg.batch_size):
                units, norms, tapes = [], [], []
                for ext, p in zip(extractors, parties):
                    raw, tape = anchored_forward(ext, p.aligned[idx])
                    unit, norm = normalize_rows(raw)
                    units.append(unit)
                    norms.append(norm)
                    tapes.append(tape)
                _, grads, _ = head_loss(head, units, labels[idx])
                head = head_step(head, grads, cfg.head_lr, train_gate=False, train_adaptors=False)
                for m, ext in enumerate(extractors):
                    d_raw = normalize_rows_backward(units[m], norms[m], grads.reps[m])
                    e_grads, _ = anchored_backward(ext, tapes[m], d_raw)
                    extractors[m] = sgd_step(ext, e_grads, cfg.lr)
    logger.debug("Vanilla VFL trained", extra={"rounds": cfg.rounds, "aligned_rows": int(len(labels))})
    return VanillaModel(tuple(extractors), head)


def predict_vanilla(model: VanillaModel, blocks: Sequence[np.ndarray], trained_classes=None) -> np.ndarray:
    reps = [represent(ext, np.asarray(b, dtype=np.float64), ext.output_dim) for ext, b in zip(model.extractors, blocks)]
    return predict_softmax(model.head, reps, trained_classes)
