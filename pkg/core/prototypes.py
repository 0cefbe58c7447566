"""Class prototypes and the probabilistic dual transport cost.

Shapes used throughout::

    reps     F   (N, d)   representations, one row per sample
    protos   P   (Z, d)   one row per class
    S = F Pᵀ     (N, Z)   similarity logits, temperature 1

Two conditional plans are built from S:

    samples_to_protos  π[n, z] ∝ p_z · exp(S[n, z])          rows sum over z
    protos_to_samples  π[z, n] ∝ w_n · exp(S[n, z])          rows sum over n

Losses return gradients wrt the reps and protos they were given.  Priors
and batch weights are constants.  ``local_loss`` chains those through the
row normalization and the extractor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal, Sequence, Union

import numpy as np

from core.errors import DegenerateInputError, DegeneratePriorError, DomainError, ShapeError
from core.numerics import (
    GradBundle,
    MlpParams,
    as_matrix,
    log_softmax,
    anchored_backward,
    anchored_forward,
    normalize_rows,
    normalize_rows_backward,
    params_as_grads,
    params_sq_norm,
    rng_for,
    softmax,
)

if TYPE_CHECKING:
    from core.priors import PriorVector

logger = logging.getLogger(__name__)

CostMode = Literal["cosine", "neg_log_prob"]
Orientation = Literal["samples_to_protos", "protos_to_samples"]
Direction = Literal["dual", "f_to_mu", "mu_to_f"]
SampleWeighting = Literal["uniform", "pseudo_prior"]

PriorLike = Union["PriorVector", np.ndarray, Sequence[float]]

_STREAM_PROTO_INIT = 31
_UNSEEN_SPREAD = 0.5
ROW_TOL = 1e-9


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrototypeSet:
    owner_party: int
    prototypes: np.ndarray  # (Z, d)

    def __post_init__(self) -> None:
        object.__setattr__(self, "prototypes", as_matrix(self.prototypes, "prototypes"))

    @property
    def num_classes(self) -> int:
        return int(self.prototypes.shape[0])

    @property
    def dim(self) -> int:
        return int(self.prototypes.shape[1])


@dataclass(frozen=True)
class TransportPlan:
    matrix: np.ndarray
    orientation: Orientation

    def row_sums_ok(self, tol: float = ROW_TOL) -> bool:
        return bool(np.all(np.abs(self.matrix.sum(axis=1) - 1.0) <= tol))


@dataclass(frozen=True)
class TransportGrads:
    reps: np.ndarray
    protos: np.ndarray


def _prior_probs(prior: PriorLike, num_classes: int) -> np.ndarray:
    p = np.asarray(getattr(prior, "probs", prior), dtype=np.float64)
    if p.shape != (num_classes,):
        raise ShapeError(f"prior has shape {p.shape}, expected ({num_classes},)")
    if np.any(p < 0.0) or float(p.sum()) <= 0.0:
        raise DegeneratePriorError("prior has no mass")
    return p


def _log_weights(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(w)


def _check_reps(protos: PrototypeSet, reps: np.ndarray) -> np.ndarray:
    f = as_matrix(reps, "reps") if np.asarray(reps).size else np.zeros((0, protos.dim))
    if f.shape[1] != protos.dim:
        raise ShapeError(f"reps have {f.shape[1]} columns, prototypes have d={protos.dim}")
    return f


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

def plan_to_prototypes(protos: PrototypeSet, prior: PriorLike, reps: np.ndarray) -> TransportPlan:
    f = _check_reps(protos, reps)
    p = _prior_probs(prior, protos.num_classes)
    logits = f @ protos.prototypes.T + _log_weights(p)
    return TransportPlan(softmax(logits), "samples_to_protos")


def pseudo_labels(protos: PrototypeSet, prior: PriorLike, reps: np.ndarray) -> np.ndarray:
    """argmax_z π(μ_z | f) per row."""
    return np.argmax(plan_to_prototypes(protos, prior, reps).matrix, axis=1)


def plan_to_samples(
    protos: PrototypeSet,
    prior: PriorLike,
    reps: np.ndarray,
    sample_weighting: SampleWeighting = "uniform",
) -> TransportPlan:
    """Prototype -> batch plan.  Batch weights are uniform unless ``pseudo_prior``.

    ``pseudo_prior`` weights sample n by the prior of its current
    pseudo-class.
    """
    f = _check_reps(protos, reps)
    if f.shape[0] == 0:
        raise DomainError("plan_to_samples needs a nonempty batch")
    p = _prior_probs(prior, protos.num_classes)
    sims = f @ protos.prototypes.T                       # (N, Z)
    if sample_weighting == "uniform":
        logits = sims.T
    elif sample_weighting == "pseudo_prior":
        pseudo = np.argmax(sims + _log_weights(p), axis=1)
        logits = sims.T + _log_weights(p[pseudo])[None, :]
    else:
        raise DomainError(f"unknown sample weighting {sample_weighting!r}")
    return TransportPlan(softmax(logits), "protos_to_samples")


# ---------------------------------------------------------------------------
# Cost matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostTape:
    mode: CostMode
    reps: np.ndarray
    protos: np.ndarray
    unit_reps: np.ndarray | None = None
    unit_protos: np.ndarray | None = None
    rep_norms: np.ndarray | None = None
    proto_norms: np.ndarray | None = None
    cos: np.ndarray | None = None
    probs: np.ndarray | None = None


def cost_matrix(reps: np.ndarray, protos: np.ndarray, mode: CostMode) -> tuple[np.ndarray, CostTape]:
    """c(μ_z, f_n) as an (N, Z) matrix plus what ``cost_backward`` needs."""
    if mode == "cosine":
        try:
            fu, fn = normalize_rows(reps)
            pu, pn = normalize_rows(protos)
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"cosine cost undefined: {exc}") from exc
        cos = fu @ pu.T
        return 1.0 - cos, CostTape(mode, reps, protos, fu, pu, fn, pn, cos=cos)
    if mode == "neg_log_prob":
        sims = reps @ protos.T
        return -log_softmax(sims), CostTape(mode, reps, protos, probs=softmax(sims))
    raise DomainError(f"unknown cost mode {mode!r}")


def cost_backward(tape: CostTape, grad_cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = grad_cost
    if tape.mode == "cosine":
        weighted = (h * tape.cos)
        d_reps = -(h @ tape.unit_protos - weighted.sum(axis=1, keepdims=True) * tape.unit_reps)
        d_reps = d_reps / tape.rep_norms[:, None]
        d_protos = -(h.T @ tape.unit_reps - weighted.sum(axis=0)[:, None] * tape.unit_protos)
        d_protos = d_protos / tape.proto_norms[:, None]
        return d_reps, d_protos
    d_sims = -h + tape.probs * h.sum(axis=1, keepdims=True)
    return d_sims @ tape.protos, d_sims.T @ tape.reps


def _softmax_rows_backward(plan: np.ndarray, grad_plan: np.ndarray) -> np.ndarray:
    return plan * (grad_plan - np.sum(plan * grad_plan, axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_f_to_mu(
    plan: TransportPlan, protos: PrototypeSet, reps: np.ndarray, mode: CostMode = "cosine"
) -> tuple[float, TransportGrads]:
    """mean_n Σ_z π(μ_z | f_n) c(μ_z, f_n)."""
    if plan.orientation != "samples_to_protos":
        raise DomainError("loss_f_to_mu needs a samples_to_protos plan")
    f = _check_reps(protos, reps)
    n = f.shape[0]
    if n == 0:
        raise DomainError("loss over an empty batch")
    pi = plan.matrix
    if pi.shape != (n, protos.num_classes):
        raise ShapeError(f"plan shape {pi.shape} does not match ({n}, {protos.num_classes})")
    p = protos.prototypes
    cost, tape = cost_matrix(f, p, mode)
    loss = float(np.sum(pi * cost)) / n

    d_sims = _softmax_rows_backward(pi, cost / n)
    c_reps, c_protos = cost_backward(tape, pi / n)
    return loss, TransportGrads(reps=d_sims @ p + c_reps, protos=d_sims.T @ f + c_protos)


def loss_mu_to_f(
    plan: TransportPlan,
    protos: PrototypeSet,
    reps: np.ndarray,
    prior: PriorLike,
    mode: CostMode = "cosine",
) -> tuple[float, TransportGrads]:
    """Σ_z p_z Σ_n π(f_n | μ_z) c(μ_z, f_n)."""
    if plan.orientation != "protos_to_samples":
        raise DomainError("loss_mu_to_f needs a protos_to_samples plan")
    f = _check_reps(protos, reps)
    n = f.shape[0]
    if n == 0:
        raise DomainError("loss over an empty batch")
    pi = plan.matrix                                     # (Z, N)
    if pi.shape != (protos.num_classes, n):
        raise ShapeError(f"plan shape {pi.shape} does not match ({protos.num_classes}, {n})")
    prior_p = _prior_probs(prior, protos.num_classes)
    p = protos.prototypes
    cost, tape = cost_matrix(f, p, mode)
    weighted_plan = prior_p[:, None] * pi
    loss = float(np.sum(weighted_plan * cost.T))

    d_sims = _softmax_rows_backward(pi, prior_p[:, None] * cost.T).T  # (N, Z)
    c_reps, c_protos = cost_backward(tape, weighted_plan.T)
    return loss, TransportGrads(reps=d_sims @ p + c_reps, protos=d_sims.T @ f + c_protos)


def local_loss(
    extractor: MlpParams,
    unaligned_batch: np.ndarray,
    protos: PrototypeSet,
    prior: PriorLike,
    phi: float,
    mode: CostMode = "cosine",
    *,
    direction: Direction = "dual",
    normalize_reps: bool = True,
    confidence_threshold: float | None = None,
    sample_weighting: SampleWeighting = "uniform",
) -> tuple[float, GradBundle]:
    """L_f→μ + L_μ→f + (φ/2)‖θ_E‖² with the exact extractor gradient.

    The returned gradient already contains φ·θ, so callers step with
    ``weight_decay=0``.
    """
    if phi < 0.0:
        raise DomainError(f"phi must be >= 0, got {phi}")
    x = as_matrix(unaligned_batch, "unaligned_batch")
    if x.shape[0] == 0:
        raise DomainError("local loss over an empty batch")
    raw, tape = anchored_forward(extractor, x)
    if normalize_reps:
        reps, norms = normalize_rows(raw)
    else:
        reps, norms = raw, None

    plan_f = plan_to_prototypes(protos, prior, reps)
    keep = np.ones(reps.shape[0], dtype=bool)
    if confidence_threshold is not None:
        keep = plan_f.matrix.max(axis=1) >= confidence_threshold

    total = 0.0
    d_reps = np.zeros_like(reps)
    if keep.any():
        kept = reps[keep]
        if direction in ("dual", "f_to_mu"):
            value, grads = loss_f_to_mu(
                TransportPlan(plan_f.matrix[keep], "samples_to_protos"), protos, kept, mode
            )
            total += value
            d_reps[keep] += grads.reps
        if direction in ("dual", "mu_to_f"):
            plan_m = plan_to_samples(protos, prior, kept, sample_weighting)
            value, grads = loss_mu_to_f(plan_m, protos, kept, prior, mode)
            total += value
            d_reps[keep] += grads.reps
    else:
        logger.debug("Every sample below confidence threshold", extra={"threshold": confidence_threshold})

    d_raw = normalize_rows_backward(reps, norms, d_reps) if normalize_reps else d_reps
    grads, _ = anchored_backward(extractor, tape, d_raw)
    total += 0.5 * phi * params_sq_norm(extractor)
    return total, grads + params_as_grads(extractor).scaled(phi)


# ---------------------------------------------------------------------------
# Prototype lifecycle (active party)
# ---------------------------------------------------------------------------

def _random_unit(dim: int, seed: int, *keys: int) -> np.ndarray:
    v = rng_for(seed, _STREAM_PROTO_INIT, *keys).standard_normal(dim)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0.0 else np.eye(dim)[0]


def class_centroid(reps: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Mean of the per-class means over the classes that have rows."""
    reps = np.asarray(reps, dtype=np.float64)
    labels = np.asarray(labels)
    means = [reps[labels == z].mean(axis=0) for z in range(num_classes) if np.any(labels == z)]
    if not means:
        raise DomainError("class centroid of an empty labelled set")
    return np.mean(means, axis=0)


def _unseen_rows(direction: np.ndarray, missing: Sequence[int], seed: int, owner_party: int) -> dict[int, np.ndarray]:
    """Unit rows near ``direction``, spread apart when several classes are missing."""
    base = direction / np.linalg.norm(direction)
    if len(missing) == 1:
        return {missing[0]: base}
    out = {}
    for z in missing:
        v = _random_unit(base.size, seed, owner_party, z)
        v = v - (v @ base) * base
        norm = float(np.linalg.norm(v))
        row = base + _UNSEEN_SPREAD * v / norm if norm > 0.0 else base
        out[z] = row / np.linalg.norm(row)
    return out


def init_prototypes(
    aligned_reps_by_class: Sequence[np.ndarray],
    dim: int,
    seed: int,
    owner_party: int = 1,
    unseen_direction: np.ndarray | None = None,
) -> PrototypeSet:
    """Normalized class means.

    Classes with no rows point along ``unseen_direction`` when one is given
    and nonzero, else at a seeded random unit vector.
    """
    if dim <= 0:
        raise DomainError(f"latent dim must be positive, got {dim}")
    rows: list[np.ndarray | None] = []
    for reps in aligned_reps_by_class:
        reps = np.asarray(reps, dtype=np.float64).reshape(-1, dim)
        mean = reps.mean(axis=0) if reps.shape[0] else np.zeros(dim)
        norm = float(np.linalg.norm(mean))
        rows.append(mean / norm if norm > 0.0 else None)
    missing = [z for z, row in enumerate(rows) if row is None]
    if missing and unseen_direction is not None and float(np.linalg.norm(unseen_direction)) > 0.0:
        filled = _unseen_rows(np.asarray(unseen_direction, dtype=np.float64).reshape(dim), missing, seed, owner_party)
    else:
        filled = {z: _random_unit(dim, seed, owner_party, z) for z in missing}
    return PrototypeSet(owner_party, np.vstack([filled[z] if row is None else row for z, row in enumerate(rows)]))


def update_prototypes(
    protos: PrototypeSet,
    adapted_aligned_reps: np.ndarray,
    labels: np.ndarray,
    rho: float,
    renormalize: bool = True,
) -> PrototypeSet:
    """μ_z ← μ_z + (ρ / N_z) Σ f̂_z, then unit rows when ``renormalize``."""
    if rho < 0.0:
        raise DomainError(f"rho must be >= 0, got {rho}")
    if rho == 0.0:
        return protos
    reps = np.asarray(adapted_aligned_reps, dtype=np.float64)
    labels = np.asarray(labels)
    out = protos.prototypes.copy()
    for z in range(protos.num_classes):
        mask = labels == z
        count = int(mask.sum())
        if count == 0:
            continue
        updated = out[z] + (rho / count) * reps[mask].sum(axis=0)
        if renormalize:
            norm = float(np.linalg.norm(updated))
            if norm == 0.0:
                continue
            updated = updated / norm
        out[z] = updated
    return PrototypeSet(protos.owner_party, out)
