"""Active-party head: adaptors, softmax gate, gated concatenation, classifier.

Forward pass for M parties, batch N, latent d::

    a_m = adapt(f_m, R_m)                 (N, d) each
    C   = [a_1 | ... | a_M]               (N, M·d)
    G   = softmax(C W)                    (N, M)
    F   = [G_1 a_1 | ... | G_M a_M]       (N, M·d)
    y   = classifier(F)                   (N, Z) logits

``forward_head`` keeps the intermediates so ``global_loss`` can return
exact gradients for every trainable piece and for the uploaded reps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from core.errors import DomainError, ShapeError
from core.numerics import (
    GradBundle,
    MlpParams,
    Tape,
    as_matrix,
    identity_mlp,
    init_mlp,
    log_softmax,
    mlp_backward,
    mlp_forward,
    rng_for,
    safe_unit_rows,
    sgd_step,
    softmax,
)
from core.prototypes import PrototypeSet

logger = logging.getLogger(__name__)

_STREAM_CLASSIFIER = 41


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GateParams:
    weight: np.ndarray  # (M·d, M)

    def __post_init__(self) -> None:
        w = as_matrix(self.weight, "gate weight")
        object.__setattr__(self, "weight", w)

    @property
    def num_parties(self) -> int:
        return int(self.weight.shape[1])

    @classmethod
    def zeros(cls, num_parties: int, dim: int) -> "GateParams":
        return cls(np.zeros((num_parties * dim, num_parties)))


@dataclass(frozen=True)
class HeadParams:
    adaptors: tuple[MlpParams, ...]
    gate: GateParams
    classifier: MlpParams

    @property
    def num_parties(self) -> int:
        return len(self.adaptors)


@dataclass(frozen=True)
class HeadTape:
    reps: tuple[np.ndarray, ...]
    adaptors: tuple[MlpParams, ...]
    adaptor_tapes: tuple[Tape, ...]
    adapted: tuple[np.ndarray, ...]
    concat: np.ndarray
    gate_weight: np.ndarray


@dataclass(frozen=True)
class FusedBatch:
    matrix: np.ndarray          # (N, M·d)
    gate_weights: np.ndarray    # (N, M)
    tape: HeadTape | None = None

    @property
    def adapted(self) -> tuple[np.ndarray, ...]:
        if self.tape is None:
            raise DomainError("fused batch carries no adapted blocks")
        return self.tape.adapted


@dataclass(frozen=True)
class HeadGrads:
    classifier: GradBundle
    gate: np.ndarray | None = None
    adaptors: tuple[GradBundle, ...] = ()
    reps: tuple[np.ndarray, ...] = ()


def init_head(
    num_parties: int,
    dim: int,
    num_classes: int,
    classifier_hidden: Sequence[int],
    seed: int,
    adaptor_depth: int = 1,
) -> HeadParams:
    """Identity adaptors, zero gate (uniform 1/M weights), seeded MLP classifier."""
    adaptors = tuple(
        MlpParams(tuple(layer for _ in range(adaptor_depth) for layer in identity_mlp(dim).layers))
        for _ in range(num_parties)
    )
    dims = [num_parties * dim, *classifier_hidden, num_classes]
    acts = ["relu"] * len(classifier_hidden) + ["identity"]
    classifier = init_mlp(dims, acts, rng_for(seed, _STREAM_CLASSIFIER))
    return HeadParams(adaptors, GateParams.zeros(num_parties, dim), classifier)


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def adapt(rep: np.ndarray, adaptor: MlpParams) -> np.ndarray:
    out, _ = mlp_forward(adaptor, rep)
    if adaptor.layers and adaptor.output_dim != adaptor.input_dim:
        raise ShapeError("adaptor must preserve the latent dimension")
    return out


def gate_weights(adapted_concat: np.ndarray, gate: GateParams) -> np.ndarray:
    c = np.asarray(adapted_concat, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != gate.weight.shape[0]:
        raise ShapeError(f"concat shape {c.shape} does not match gate input {gate.weight.shape[0]}")
    return softmax(c @ gate.weight)


def fuse(adapted_blocks: Sequence[np.ndarray], weights: np.ndarray) -> FusedBatch:
    blocks = [np.asarray(b, dtype=np.float64) for b in adapted_blocks]
    w = np.asarray(weights, dtype=np.float64)
    rows = {b.shape[0] for b in blocks}
    if len(rows) != 1 or w.shape != (blocks[0].shape[0], len(blocks)):
        raise ShapeError(f"blocks {[b.shape for b in blocks]} do not match weights {w.shape}")
    scaled = [b * w[:, m:m + 1] for m, b in enumerate(blocks)]
    return FusedBatch(np.hstack(scaled), w)


def forward_head(head: HeadParams, reps_by_party: Sequence[np.ndarray]) -> FusedBatch:
    if len(reps_by_party) != head.num_parties:
        raise ShapeError(f"head expects {head.num_parties} parties, got {len(reps_by_party)}")
    reps = tuple(np.asarray(r, dtype=np.float64) for r in reps_by_party)
    adapted, tapes = [], []
    for rep, adaptor in zip(reps, head.adaptors):
        out, tape = mlp_forward(adaptor, rep)
        adapted.append(out)
        tapes.append(tape)
    concat = np.hstack(adapted)
    weights = gate_weights(concat, head.gate)
    fused = fuse(adapted, weights)
    return replace(
        fused,
        tape=HeadTape(reps, head.adaptors, tuple(tapes), tuple(adapted), concat, head.gate.weight),
    )


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient wrt the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, z = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows")
    if n == 0:
        raise DomainError("cross-entropy of an empty batch")
    if labels.min() < 0 or labels.max() >= z:
        raise DomainError(f"labels must lie in [0, {z})")
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def global_loss(fused: FusedBatch, labels: np.ndarray, classifier: MlpParams) -> tuple[float, HeadGrads]:
    """Cross-entropy of the classifier on the fused batch, with exact gradients.

    Gate, adaptor and rep gradients are filled only when ``fused`` came from
    ``forward_head``.
    """
    logits, ctape = mlp_forward(classifier, fused.matrix)
    loss, d_logits = cross_entropy(logits, labels)
    c_grads, d_fused = mlp_backward(classifier, ctape, d_logits)
    tape = fused.tape
    if tape is None:
        return loss, HeadGrads(classifier=c_grads)

    g = fused.gate_weights
    num_parties = g.shape[1]
    dim = d_fused.shape[1] // num_parties
    d_blocks = [d_fused[:, m * dim:(m + 1) * dim] for m in range(num_parties)]
    d_gate = np.stack([np.sum(d_blocks[m] * tape.adapted[m], axis=1) for m in range(num_parties)], axis=1)
    d_gate_logits = g * (d_gate - np.sum(g * d_gate, axis=1, keepdims=True))
    d_w = tape.concat.T @ d_gate_logits
    d_concat = d_gate_logits @ tape.gate_weight.T

    adaptor_grads, rep_grads = [], []
    for m in range(num_parties):
        d_adapted = g[:, m:m + 1] * d_blocks[m] + d_concat[:, m * dim:(m + 1) * dim]
        a_grads, d_rep = mlp_backward(tape.adaptors[m], tape.adaptor_tapes[m], d_adapted)
        adaptor_grads.append(a_grads)
        rep_grads.append(d_rep)
    return loss, HeadGrads(
        classifier=c_grads, gate=d_w, adaptors=tuple(adaptor_grads), reps=tuple(rep_grads)
    )


def head_loss(
    head: HeadParams, reps_by_party: Sequence[np.ndarray], labels: np.ndarray
) -> tuple[float, HeadGrads, FusedBatch]:
    fused = forward_head(head, reps_by_party)
    loss, grads = global_loss(fused, labels, head.classifier)
    return loss, grads, fused


def head_step(
    head: HeadParams,
    grads: HeadGrads,
    lr: float,
    train_gate: bool = True,
    train_adaptors: bool = True,
) -> HeadParams:
    classifier = sgd_step(head.classifier, grads.classifier, lr)
    gate = head.gate
    if train_gate and grads.gate is not None and lr != 0.0:
        gate = GateParams(head.gate.weight - lr * grads.gate)
    adaptors = head.adaptors
    if train_adaptors and grads.adaptors:
        adaptors = tuple(sgd_step(a, g, lr) for a, g in zip(head.adaptors, grads.adaptors))
    return HeadParams(adaptors, gate, classifier)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def predict_logits(head: HeadParams, reps_by_party: Sequence[np.ndarray]) -> np.ndarray:
    fused = forward_head(head, reps_by_party)
    logits, _ = mlp_forward(head.classifier, fused.matrix)
    return logits


def predict_softmax(
    head: HeadParams,
    reps_by_party: Sequence[np.ndarray],
    trained_classes: Sequence[int] | None = None,
) -> np.ndarray:
    """Argmax class ids.  Classes outside ``trained_classes`` are never emitted."""
    logits = predict_logits(head, reps_by_party)
    if trained_classes is not None:
        allowed = np.asarray(list(trained_classes), dtype=np.int64)
        if allowed.size == 0:
            raise DomainError("softmax inference needs at least one trained class")
        if np.any((allowed < 0) | (allowed >= logits.shape[1])):
            raise DomainError(f"trained classes {allowed.tolist()} fall outside 0..{logits.shape[1] - 1}")
        mask = np.full(logits.shape[1], -np.inf)
        mask[allowed] = 0.0
        logits = logits + mask
    return np.argmax(logits, axis=1)


def prototype_scores(
    adapted_reps_by_party: Sequence[np.ndarray], prototype_sets: Sequence[PrototypeSet]
) -> np.ndarray:
    """Σ_m cos(f̂^m, μ^m_z) as an (N, Z) matrix."""
    if len(adapted_reps_by_party) != len(prototype_sets) or not prototype_sets:
        raise ShapeError("need one prototype set per party")
    total = None
    for reps, protos in zip(adapted_reps_by_party, prototype_sets):
        sims = safe_unit_rows(np.asarray(reps, dtype=np.float64)) @ safe_unit_rows(protos.prototypes).T
        total = sims if total is None else total + sims
    return total


def prototype_nn_predict(
    adapted_reps_by_party: Sequence[np.ndarray], prototype_sets: Sequence[PrototypeSet]
) -> np.ndarray:
    """Nearest-prototype class per sample; ties go to the lowest class id."""
    return np.argmax(prototype_scores(adapted_reps_by_party, prototype_sets), axis=1)
