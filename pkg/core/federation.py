"""Round protocol: setup exchange, per-round message flow, active-party training.

One round, wire round r = t + 1::

    active  --ProtoDown(r, μ^m, P_g)-->  party m          (every m)
    party m: mix prior, EM estimate, τ epochs of local SGD, aligned reps
    party m --ReprUp(r, m, f_a^m, P^m)-->  active
    active: average priors, τ epochs on the gated head, update μ^m

Party phases run concurrently through ``workers.party``; the active phase
consumes ReprUps sorted by party id so scheduling never changes results.
Round 0 is a setup exchange that carries only ReprUps: the initial aligned
representations the active party needs to seed each party's prototypes.
"""
from __future__ import annotations

import asyncio
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Awaitable, Callable, Literal, Sequence

import numpy as np

from core.aggregation import (
    GateParams,
    HeadParams,
    forward_head,
    head_loss,
    head_step,
    init_head,
)
from core.data import Scenario
from core.errors import DomainError, FramingError, ProtocolError, TransportError
from core.numerics import Layer, MlpParams, init_mlp, rng_for
from core.priors import PriorVector, average_global_prior, init_prior
from core.privacy import NoiseConfig, inject_noise
from core.prototypes import (
    CostMode,
    Direction,
    PrototypeSet,
    SampleWeighting,
    class_centroid,
    init_prototypes,
    update_prototypes,
)
from core.transport import RoundGuard, Transport, TransportKind, make_transport
from core.wire import ProtoDown, ReprUp, decode_message, encode_message

logger = logging.getLogger(__name__)

_STREAM_EXTRACTOR = 71
_STREAM_HEAD_BATCH = 61
NOISE_KEY_PROTO = 1
NOISE_KEY_REPR = 2

RoundCallback = Callable[["FedState"], None]


# ---------------------------------------------------------------------------
# Configuration and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FedConfig:
    num_classes: int
    seed: int = 0
    rounds: int = 30
    local_epochs: int = 1
    head_epochs: int = 20
    batch_size: int = 64
    lr: float = 0.002
    head_lr: float = 0.2
    phi: float = 0.1
    rho: float = 0.1
    latent_dim: int = 8
    extractor_hidden: tuple[int, ...] = ()
    classifier_hidden: tuple[int, ...] = (32, 32)
    adaptor_depth: int = 1
    cost_mode: CostMode = "cosine"
    sample_weighting: SampleWeighting = "uniform"
    confidence_threshold: float | None = None
    renormalize_prototypes: bool = True
    centre_prototypes: bool = True
    transport_direction: Direction = "dual"
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    prototype_update: bool = True
    prototype_learning: bool = True
    mixed_prior: bool = True
    gated_aggregation: bool = True
    transport: TransportKind = "inproc"
    timeout: float = 30.0


@dataclass(frozen=True)
class CommRecord:
    round: int
    direction: Literal["down", "up"]
    party_id: int
    variant: str
    nbytes: int


@dataclass(frozen=True)
class PartyState:
    """Everything party m keeps between rounds.  Never holds labels."""

    party_id: int
    extractor: MlpParams
    prior_history: tuple[PriorVector, ...]
    local_estimate: PriorVector
    gamma: float = 0.0
    received_prototypes: PrototypeSet | None = None
    received_global_prior: PriorVector | None = None
    local_loss: float | None = None


@dataclass(frozen=True)
class FedState:
    t: int                                  # completed rounds
    parties: tuple[PartyState, ...]
    head: HeadParams
    prototypes: tuple[PrototypeSet, ...]
    global_prior: PriorVector
    comm_log: tuple[CommRecord, ...] = ()
    error_log: tuple[str, ...] = ()
    loss_history: tuple[float, ...] = ()

    def party(self, party_id: int) -> PartyState:
        return self.parties[party_id - 1]


@dataclass(frozen=True)
class CommCost:
    total: int
    per_round: dict[int, int]


def comm_cost(log: Sequence[CommRecord]) -> CommCost:
    per_round: dict[int, int] = {}
    for rec in log:
        per_round[rec.round] = per_round.get(rec.round, 0) + rec.nbytes
    return CommCost(total=sum(per_round.values()), per_round=dict(sorted(per_round.items())))


def batch_schedule(seed: int, keys: Sequence[int], num_rows: int, batch_size: int) -> list[np.ndarray]:
    """Seeded permutation of ``num_rows`` cut into batches of ``batch_size``."""
    if num_rows == 0:
        return []
    order = rng_for(seed, *keys).permutation(num_rows)
    return [order[i:i + batch_size] for i in range(0, num_rows, batch_size)]


def head_batch_keys(round_: int, epoch: int) -> tuple[int, ...]:
    return (_STREAM_HEAD_BATCH, round_, epoch)


def init_extractor(input_dim: int, cfg: FedConfig, party_id: int) -> MlpParams:
    dims = [input_dim, *cfg.extractor_hidden, cfg.latent_dim]
    acts = ["relu"] * len(cfg.extractor_hidden) + ["identity"]
    return init_mlp(dims, acts, rng_for(cfg.seed, _STREAM_EXTRACTOR, party_id))


def _log_frame(log: list[CommRecord], round_: int, direction: str, party_id: int, variant: str, frame: bytes) -> None:
    log.append(CommRecord(round_, direction, party_id, variant, len(frame)))


async def _gather_or_cancel(*coros: Awaitable):
    tasks = [asyncio.ensure_future(c) for c in coros]
    try:
        return await asyncio.gather(*tasks)
    except BaseException:
        for task in tasks:
            task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        raise


# ---------------------------------------------------------------------------
# Active party
# ---------------------------------------------------------------------------

async def _collect_ups(
    transport: Transport,
    party_ids: Sequence[int],
    round_: int,
    guard: RoundGuard,
    log: list[CommRecord],
) -> dict[int, ReprUp]:
    ups: dict[int, ReprUp] = {}
    for m in sorted(party_ids):
        while True:
            frame = await transport.recv_up(m)
            msg, rest = decode_message(frame)
            if rest or not isinstance(msg, ReprUp):
                raise ProtocolError(f"expected a single ReprUp from party {m}")
            if msg.party_id != m or msg.round >= round_:
                break
            logger.warning("Dropping stale ReprUp", extra={"round": round_, "party_id": m, "stale_round": msg.round})
        if msg.party_id != m or msg.round != round_:
            raise ProtocolError(
                f"party {m} sent ReprUp(party={msg.party_id}, round={msg.round}) during round {round_}"
            )
        guard.check(m, "up", msg.round)
        _log_frame(log, round_, "up", m, "ReprUp", frame)
        ups[m] = msg
    return ups


def train_head(
    head: HeadParams,
    reps_by_party: Sequence[np.ndarray],
    labels: np.ndarray,
    cfg: FedConfig,
    round_: int,
) -> HeadParams:
    """``head_epochs`` epochs of SGD on the gated head over the aligned rows."""
    for epoch in range(cfg.head_epochs):
        for idx in batch_schedule(cfg.seed, head_batch_keys(round_, epoch), len(labels), cfg.batch_size):
            _, grads, _ = head_loss(head, [r[idx] for r in reps_by_party], labels[idx])
            head = head_step(
                head,
                grads,
                cfg.head_lr,
                train_gate=cfg.gated_aggregation,
                train_adaptors=cfg.gated_aggregation,
            )
    return head


def aligned_objective(head: HeadParams, reps_by_party: Sequence[np.ndarray], labels: np.ndarray) -> float | None:
    if len(labels) == 0:
        return None
    loss, _, _ = head_loss(head, reps_by_party, labels)
    return loss


def _centred(reps: np.ndarray, labels: np.ndarray, cfg: FedConfig) -> tuple[np.ndarray, np.ndarray | None]:
    """Reps minus their class-balanced centroid, and that centroid.

    Needs two labelled classes; otherwise the reps come back unchanged.
    """
    if not cfg.centre_prototypes or len(np.unique(labels)) < 2:
        return reps, None
    centroid = class_centroid(reps, labels, cfg.num_classes)
    return reps - centroid, centroid


def seed_prototypes(reps: np.ndarray, labels: np.ndarray, cfg: FedConfig, owner_party: int) -> PrototypeSet:
    """Prototypes for one party from its setup upload.

    Centred class means keep prototypes apart; a class with no aligned rows
    points away from the centroid of the classes that have some.
    """
    centred, centroid = _centred(reps, labels, cfg)
    by_class = [centred[labels == cls] for cls in range(cfg.num_classes)]
    unseen = -centroid if centroid is not None else None
    return init_prototypes(by_class, cfg.latent_dim, cfg.seed, owner_party=owner_party, unseen_direction=unseen)


async def initialize_federation(
    scenario: Scenario,
    cfg: FedConfig,
    transport: Transport,
    guard: RoundGuard | None = None,
) -> FedState:
    """Build round-0 state and run the setup exchange that seeds prototypes."""
    from workers.party import party_setup

    guard = guard or RoundGuard()
    z = scenario.num_classes
    uniform = init_prior(z)
    parties = tuple(
        PartyState(
            party_id=p.party_id,
            extractor=init_extractor(p.aligned.shape[1], cfg, p.party_id),
            prior_history=(uniform,),
            local_estimate=uniform,
        )
        for p in scenario.parties
    )
    log: list[CommRecord] = []
    party_ids = [p.party_id for p in scenario.parties]
    _, ups = await _gather_or_cancel(
        _gather_or_cancel(*(party_setup(s, d, cfg, transport) for s, d in zip(parties, scenario.parties))),
        _collect_ups(transport, party_ids, 0, guard, log),
    )
    labels = scenario.active.labels_aligned
    prototypes = []
    for m in sorted(ups):
        prototypes.append(seed_prototypes(ups[m].aligned_reps, labels, cfg, m))
    head = init_head(len(parties), cfg.latent_dim, z, cfg.classifier_hidden, cfg.seed, cfg.adaptor_depth)
    logger.info(
        "Federation initialized",
        extra={"parties": len(parties), "aligned_rows": int(len(labels)), "setup_bytes": sum(r.nbytes for r in log)},
    )
    return FedState(
        t=0,
        parties=parties,
        head=head,
        prototypes=tuple(prototypes),
        global_prior=uniform,
        comm_log=tuple(log),
    )


async def run_round(
    state: FedState,
    scenario: Scenario,
    cfg: FedConfig,
    transport: Transport,
    guard: RoundGuard | None = None,
) -> FedState:
    """Execute one protocol round.  A channel failure returns ``state`` plus an error entry."""
    from workers.party import party_round

    if state.t >= cfg.rounds:
        raise DomainError(f"round {state.t} is past the configured {cfg.rounds} rounds")
    guard = guard or RoundGuard()
    round_ = state.t + 1
    log: list[CommRecord] = []
    labels = scenario.active.labels_aligned
    party_ids = [p.party_id for p in scenario.parties]

    try:
        for protos in state.prototypes:
            m = protos.owner_party
            sent = inject_noise(protos.prototypes, _proto_noise(cfg), round_, m, NOISE_KEY_PROTO)
            frame = encode_message(ProtoDown(round_, sent, state.global_prior.probs))
            await transport.send_down(m, frame)
            _log_frame(log, round_, "down", m, "ProtoDown", frame)

        new_parties, ups = await _gather_or_cancel(
            _gather_or_cancel(
                *(party_round(s, d, cfg, transport, guard, round_) for s, d in zip(state.parties, scenario.parties))
            ),
            _collect_ups(transport, party_ids, round_, guard, log),
        )
    except (TransportError, FramingError, ProtocolError) as exc:
        logger.error("Round aborted", extra={"round": round_, "error": str(exc)})
        return replace(state, error_log=state.error_log + (f"round {round_}: {exc}",))

    ordered = [ups[m] for m in sorted(ups)]
    reps = [u.aligned_reps for u in ordered]
    global_prior = state.global_prior
    if cfg.mixed_prior:
        global_prior = average_global_prior([PriorVector.normalized(u.local_prior) for u in ordered])

    head = train_head(state.head, reps, labels, cfg, round_)

    prototypes = state.prototypes
    if cfg.prototype_update and cfg.rho > 0.0 and len(labels):
        adapted = forward_head(head, reps).adapted
        prototypes = tuple(
            update_prototypes(p, _centred(adapted[i], labels, cfg)[0], labels, cfg.rho, cfg.renormalize_prototypes)
            for i, p in enumerate(state.prototypes)
        )

    history = state.loss_history
    objective = aligned_objective(head, reps, labels)
    if objective is not None:
        history = history + (objective,)
    round_bytes = sum(r.nbytes for r in log)
    logger.info(
        "Round complete",
        extra={"round": round_, "bytes": round_bytes, "loss": objective, "gamma": [p.gamma for p in new_parties]},
    )
    return FedState(
        t=round_,
        parties=tuple(new_parties),
        head=head,
        prototypes=prototypes,
        global_prior=global_prior,
        comm_log=state.comm_log + tuple(log),
        error_log=state.error_log,
        loss_history=history,
    )


def _proto_noise(cfg: FedConfig) -> NoiseConfig:
    return cfg.noise if cfg.noise.applies_to("prototypes") else NoiseConfig()


async def run_federation(
    scenario: Scenario,
    cfg: FedConfig,
    transport: Transport | None = None,
    on_round: RoundCallback | None = None,
) -> FedState:
    """Setup exchange plus ``cfg.rounds`` rounds.  Stops early after an aborted round."""
    transport = transport or make_transport(cfg.transport, cfg.timeout)
    guard = RoundGuard()
    await transport.open(p.party_id for p in scenario.parties)
    try:
        state = await initialize_federation(scenario, cfg, transport, guard)
        if on_round is not None:
            on_round(state)
        while state.t < cfg.rounds:
            nxt = await run_round(state, scenario, cfg, transport, guard)
            if nxt.t == state.t:
                logger.warning("Stopping federation after aborted round", extra={"round": state.t + 1})
                state = nxt
                break
            state = nxt
            if on_round is not None:
                on_round(state)
    finally:
        await transport.close()
    return state


def run_federation_sync(
    scenario: Scenario,
    cfg: FedConfig,
    transport: Transport | None = None,
    on_round: RoundCallback | None = None,
) -> FedState:
    return asyncio.run(run_federation(scenario, cfg, transport, on_round))


# ---------------------------------------------------------------------------
# Digest and persistence
# ---------------------------------------------------------------------------


def _state_arrays(state: FedState) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    for p in state.parties:
        for i, a in enumerate(p.extractor.arrays()):
            out.append((f"party{p.party_id}__extractor__{i}", a))
        out.append((f"party{p.party_id}__estimate", p.local_estimate.probs))
        if p.received_prototypes is not None:
            out.append((f"party{p.party_id}__received_prototypes", p.received_prototypes.prototypes))
    for m, adaptor in enumerate(state.head.adaptors, start=1):
        for i, a in enumerate(adaptor.arrays()):
            out.append((f"head__adaptor{m}__{i}", a))
    out.append(("head__gate", state.head.gate.weight))
    for i, a in enumerate(state.head.classifier.arrays()):
        out.append((f"head__classifier__{i}", a))
    for protos in state.prototypes:
        out.append((f"prototypes__{protos.owner_party}", protos.prototypes))
    out.append(("global_prior", state.global_prior.probs))
    return out


def _state_meta(state: FedState) -> dict:
    return {
        "t": state.t,
        "comm_log": [[r.round, r.direction, r.party_id, r.variant, r.nbytes] for r in state.comm_log],
        "error_log": list(state.error_log),
        "loss_history": list(state.loss_history),
        "parties": [
            {
                "party_id": p.party_id,
                "activations": [l.activation for l in p.extractor.layers],
                "gamma": p.gamma,
                "prior_history": [h.probs.tolist() for h in p.prior_history],
                "has_received_prior": p.received_global_prior is not None,
            }
            for p in state.parties
        ],
        "adaptor_activations": [[l.activation for l in a.layers] for a in state.head.adaptors],
        "classifier_activations": [l.activation for l in state.head.classifier.layers],
    }


def state_digest(state: FedState) -> str:
    """sha256 over every parameter, prototype, prior and the comm log."""
    h = hashlib.sha256()
    for name, arr in _state_arrays(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    h.update(json.dumps(_state_meta(state)["comm_log"]).encode())
    return h.hexdigest()


def save_state(path: str | Path, state: FedState, scenario: Scenario | None = None) -> None:
    """Write ``state`` to an ``.npz``.  With ``scenario`` the aligned blocks and
    labels are included so the attack can be replayed offline."""
    arrays = dict(_state_arrays(state))
    if state.parties and state.parties[0].received_global_prior is not None:
        for p in state.parties:
            arrays[f"party{p.party_id}__received_prior"] = p.received_global_prior.probs
    if scenario is not None:
        for p in scenario.parties:
            arrays[f"scenario__aligned{p.party_id}"] = p.aligned
        arrays["scenario__aligned_labels"] = scenario.aligned_labels.astype(np.int64)
    arrays["meta"] = np.array(json.dumps(_state_meta(state)))
    np.savez(path, **arrays)


def _load_mlp(arrays, prefix: str, activations: list[str]) -> MlpParams:
    layers = []
    for i, act in enumerate(activations):
        layers.append(Layer(arrays[f"{prefix}__{2 * i}"], arrays[f"{prefix}__{2 * i + 1}"], act))
    return MlpParams(tuple(layers))


@dataclass(frozen=True)
class SavedRun:
    state: FedState
    aligned_blocks: dict[int, np.ndarray]
    aligned_labels: np.ndarray | None


def load_state(path: str | Path) -> SavedRun:
    with np.load(path, allow_pickle=False) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(str(arrays["meta"]))
    parties = []
    for info in meta["parties"]:
        m = info["party_id"]
        received = arrays.get(f"party{m}__received_prototypes")
        received_prior = arrays.get(f"party{m}__received_prior")
        parties.append(
            PartyState(
                party_id=m,
                extractor=_load_mlp(arrays, f"party{m}__extractor", info["activations"]),
                prior_history=tuple(PriorVector(np.asarray(h)) for h in info["prior_history"]),
                local_estimate=PriorVector(arrays[f"party{m}__estimate"]),
                gamma=info["gamma"],
                received_prototypes=PrototypeSet(m, received) if received is not None else None,
                received_global_prior=(
                    PriorVector(received_prior) if received_prior is not None else None
                ),
            )
        )
    adaptors = tuple(
        _load_mlp(arrays, f"head__adaptor{m}", acts)
        for m, acts in enumerate(meta["adaptor_activations"], start=1)
    )
    head = HeadParams(
        adaptors,
        GateParams(arrays["head__gate"]),
        _load_mlp(arrays, "head__classifier", meta["classifier_activations"]),
    )
    prototypes = tuple(
        PrototypeSet(p.party_id, arrays[f"prototypes__{p.party_id}"]) for p in parties
    )
    state = FedState(
        t=meta["t"],
        parties=tuple(parties),
        head=head,
        prototypes=prototypes,
        global_prior=PriorVector(arrays["global_prior"]),
        comm_log=tuple(CommRecord(*r) for r in meta["comm_log"]),
        error_log=tuple(meta["error_log"]),
        loss_history=tuple(meta["loss_history"]),
    )
    blocks = {p.party_id: arrays[f"scenario__aligned{p.party_id}"] for p in parties if f"scenario__aligned{p.party_id}" in arrays}
    labels = arrays.get("scenario__aligned_labels")
    return SavedRun(state, blocks, labels)

