"""Party-side work for the round protocol.

A party sees only its own feature block (plus aligned labels when it is the
active party), the frames addressed to it and its own ``PartyState``.  The
numeric part of a round runs in a worker thread so parties overlap.
"""
from __future__ import annotations

import asyncio
import logging
from dataclasses import replace

import numpy as np

from core.data import PartyDataset
from core.errors import ProtocolError
from core.federation import NOISE_KEY_REPR, FedConfig, PartyState, batch_schedule
from core.metrics import class_counts
from core.numerics import MlpParams, anchored_forward, normalize_rows, sgd_step
from core.priors import PriorVector, compute_gamma, estimate_local_prior, init_prior, mix_prior
from core.privacy import NoiseConfig, inject_noise
from core.prototypes import PrototypeSet, local_loss, pseudo_labels
from core.transport import RoundGuard, Transport
from core.wire import ProtoDown, ReprUp, decode_message, encode_message

logger = logging.getLogger(__name__)

_STREAM_LOCAL_BATCH = 81


def represent(extractor: MlpParams, features: np.ndarray, dim: int) -> np.ndarray:
    """L2-normalized anchored extractor output; (0, d) for an empty block."""
    if features.shape[0] == 0:
        return np.zeros((0, dim))
    raw, _ = anchored_forward(extractor, features)
    unit, _ = normalize_rows(raw)
    return unit


def _repr_noise(cfg: FedConfig) -> NoiseConfig:
    return cfg.noise if cfg.noise.applies_to("representations") else NoiseConfig()


def _upload(extractor: MlpParams, data: PartyDataset, cfg: FedConfig, round_: int) -> np.ndarray:
    reps = represent(extractor, data.aligned, cfg.latent_dim)
    return inject_noise(reps, _repr_noise(cfg), round_, data.party_id, NOISE_KEY_REPR)


def setup_message(state: PartyState, data: PartyDataset, cfg: FedConfig) -> ReprUp:
    """Round-0 upload of the initial aligned representations."""
    return ReprUp(0, state.party_id, _upload(state.extractor, data, cfg, 0), state.local_estimate.probs)


def _gamma(protos: PrototypeSet, prior: PriorVector, unaligned_reps: np.ndarray, data: PartyDataset) -> float:
    z = protos.num_classes
    counts = np.zeros(z, dtype=np.int64)
    if unaligned_reps.shape[0]:
        counts = counts + class_counts(pseudo_labels(protos, prior, unaligned_reps), z)
    if data.labels_aligned is not None:
        counts = counts + class_counts(data.labels_aligned, z)
    if counts.sum() == 0:
        return 0.0
    return compute_gamma(counts).value


def local_phase(
    state: PartyState, data: PartyDataset, msg: ProtoDown, cfg: FedConfig
) -> tuple[PartyState, ReprUp]:
    """Mix the prior, re-estimate it, train the extractor, build the upload."""
    round_ = msg.round
    m = state.party_id
    protos = PrototypeSet(m, msg.prototypes)
    global_prior = PriorVector.normalized(msg.global_prior)
    extractor = state.extractor
    estimate = state.local_estimate
    gamma = 0.0

    if cfg.mixed_prior:
        unaligned_reps = represent(extractor, data.unaligned, cfg.latent_dim)
        gamma = _gamma(protos, state.prior_history[-1], unaligned_reps, data)
        mixed = mix_prior(estimate, global_prior, gamma)
        history = state.prior_history + (mixed,)
        # two-round lag once it exists
        lagged = history[round_ - 2] if round_ >= 2 else history[-1]
        if unaligned_reps.shape[0]:
            estimate = estimate_local_prior(unaligned_reps, protos, lagged)
    else:
        mixed = init_prior(protos.num_classes)
        history = state.prior_history + (mixed,)

    losses: list[float] = []
    if cfg.prototype_learning:
        for epoch in range(cfg.local_epochs):
            keys = (_STREAM_LOCAL_BATCH, round_, m, epoch)
            for idx in batch_schedule(cfg.seed, keys, data.unaligned.shape[0], cfg.batch_size):
                loss, grads = local_loss(
                    extractor,
                    data.unaligned[idx],
                    protos,
                    mixed,
                    cfg.phi,
                    cfg.cost_mode,
                    direction=cfg.transport_direction,
                    confidence_threshold=cfg.confidence_threshold,
                    sample_weighting=cfg.sample_weighting,
                )
                extractor = sgd_step(extractor, grads, cfg.lr)
                losses.append(loss)

    up = ReprUp(round_, m, _upload(extractor, data, cfg, round_), estimate.probs)
    new_state = replace(
        state,
        extractor=extractor,
        prior_history=history,
        local_estimate=estimate,
        gamma=gamma,
        received_prototypes=protos,
        received_global_prior=global_prior,
        local_loss=float(np.mean(losses)) if losses else None,
    )
    return new_state, up


async def party_setup(state: PartyState, data: PartyDataset, cfg: FedConfig, transport: Transport) -> None:
    up = await asyncio.to_thread(setup_message, state, data, cfg)
    await transport.send_up(state.party_id, encode_message(up))


async def party_round(
    state: PartyState,
    data: PartyDataset,
    cfg: FedConfig,
    transport: Transport,
    guard: RoundGuard,
    round_: int,
) -> PartyState:
    """Receive the ProtoDown for wire round ``round_``, run the local phase off-loop, send ReprUp.

    Frames left over from an earlier aborted round are dropped; a frame from
    a later round is a protocol violation.
    """
    m = state.party_id
    while True:
        frame = await transport.recv_down(m)
        msg, rest = decode_message(frame)
        if rest or not isinstance(msg, ProtoDown):
            raise ProtocolError(f"party {m} expected a single ProtoDown")
        if msg.round >= round_:
            break
        logger.warning("Dropping stale ProtoDown", extra={"round": round_, "party_id": m, "stale_round": msg.round})
    if msg.round != round_:
        raise ProtocolError(f"party {m} got ProtoDown for round {msg.round} during round {round_}")
    guard.check(m, "down", msg.round)
    new_state, up = await asyncio.to_thread(local_phase, state, data, msg, cfg)
    await transport.send_up(m, encode_message(up))
    logger.debug(
        "Party round done",
        extra={"round": msg.round, "party_id": m, "gamma": new_state.gamma, "local_loss": new_state.local_loss},
    )
    return new_state
