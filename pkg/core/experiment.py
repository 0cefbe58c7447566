"""Config-driven experiment runner and the JSON report it produces.

Per seed: build the scenario, run the primary method and every
``compare_with`` method on it, score all of them on the same test rows.
Seeds run sequentially and share nothing but the config.
"""
from __future__ import annotations

import json
import logging
import pathlib
import time
from dataclasses import replace
from typing import Callable, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from config import ExperimentConfig, config_echo, validate_config
from core.aggregation import forward_head, predict_softmax, prototype_nn_predict
from core.baselines import (
    predict_classifier,
    predict_vanilla,
    train_local,
    train_upper_boundary,
    train_vanilla_vfl,
    upper_boundary_rows,
)
from core.data import (
    Scenario,
    load_tabular,
    partition_vertical,
    split_aligned,
    split_test,
    standardize,
    synth_dataset,
)
from core.federation import FedConfig, FedState, comm_cost, run_federation_sync, state_digest
from core.logging_config import seed_context
from core.metrics import accuracy, per_class_recall
from core.numerics import mlp_forward
from core.privacy import NoiseConfig, label_inference_attack
from core.scenario import ImbalanceSpec, RareClass, apply_imbalance, imbalance_report
from core.transport import make_transport
from workers.party import represent

logger = logging.getLogger(__name__)

_VERSION_FILE = pathlib.Path(__file__).resolve().parent.parent / "VERSION"


def version() -> str:
    try:
        return _VERSION_FILE.read_text().strip()
    except OSError:
        return "0.0.0+unknown"


# ---------------------------------------------------------------------------
# Report schema
# ---------------------------------------------------------------------------

class ImbalanceSummary(BaseModel):
    mid: float
    wcs: float
    party_mid: dict[int, Optional[float]]
    per_party_counts: dict[int, list[int]]


class MethodResult(BaseModel):
    method: str
    accuracy: float
    per_class_recall: list[Optional[float]]
    unseen_classes: list[int] = Field(default_factory=list)
    unseen_class_recall: Optional[float] = None
    comm_bytes: Optional[int] = None
    comm_per_round: dict[int, int] = Field(default_factory=dict)
    round_accuracy: list[float] = Field(default_factory=list)
    rounds_to_best: Optional[int] = None
    bytes_to_best: Optional[int] = None
    loss_curve: list[float] = Field(default_factory=list)
    attack: dict[int, float] = Field(default_factory=dict)
    attack_mean: Optional[float] = None
    error_log: list[str] = Field(default_factory=list)
    digest: Optional[str] = None


class SeedResult(BaseModel):
    seed: int
    imbalance: ImbalanceSummary
    methods: dict[str, MethodResult]


class MethodSummary(BaseModel):
    per_seed_accuracy: list[float]
    mean_accuracy: float
    per_seed_unseen_recall: list[Optional[float]] = Field(default_factory=list)
    mean_unseen_recall: Optional[float] = None
    per_seed_attack: list[Optional[float]] = Field(default_factory=list)
    mean_attack: Optional[float] = None


class Comparison(BaseModel):
    method: str
    baseline: str
    per_seed_difference: list[float]
    mean_difference: float


class Report(BaseModel):
    version: str
    config: dict
    seeds: list[int]
    per_seed: list[SeedResult]
    summary: dict[str, MethodSummary]
    comparisons: list[Comparison] = Field(default_factory=list)
    timing: dict[str, float] = Field(default_factory=dict)


def canonical_json(report: Report) -> str:
    """Deterministic JSON without wall-clock fields."""
    return json.dumps(report.model_dump(mode="json", exclude={"timing"}), sort_keys=True, indent=2)


def write_report(report: Report, path: str | pathlib.Path) -> None:
    payload = report.model_dump(mode="json")
    pathlib.Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2), encoding="utf-8")


# ---------------------------------------------------------------------------
# Scenario and config plumbing
# ---------------------------------------------------------------------------

def imbalance_spec_for(cfg: ExperimentConfig) -> ImbalanceSpec:
    return ImbalanceSpec(
        gamma=cfg.imbalance.gamma,
        rare_classes=tuple(
            RareClass(rc.class_id, rc.mode, rc.keep_count) for rc in cfg.imbalance.rare_classes
        ),
        num_majority=cfg.imbalance.num_majority,
    )


def build_scenario(cfg: ExperimentConfig, seed: int) -> Scenario:
    ds_cfg = cfg.dataset
    if ds_cfg.source == "synth":
        dataset = synth_dataset(
            ds_cfg.synth_classes, ds_cfg.per_class, ds_cfg.num_features, ds_cfg.class_separation, seed
        )
    else:
        dataset = load_tabular(
            ds_cfg.path, ds_cfg.label_column, ds_cfg.id_column, ds_cfg.num_classes, standardized=False
        )
    train, test = split_test(dataset, ds_cfg.test_ratio, seed)
    train, test = standardize(train, test)
    blocks = partition_vertical(train, cfg.num_parties, cfg.split_spec)
    test_blocks = partition_vertical(test, cfg.num_parties, cfg.split_spec)
    scenario = split_aligned(blocks, train.labels, train.ids, cfg.aligned_ratio, seed, dataset.num_classes)
    scenario = replace(scenario, meta={"seed": seed, "aligned_ratio": cfg.aligned_ratio})
    scenario = apply_imbalance(scenario, imbalance_spec_for(cfg), seed)
    return replace(scenario, test=test, test_blocks=tuple(test_blocks), full_train=train)


def fed_config_for(cfg: ExperimentConfig, seed: int, num_classes: int) -> FedConfig:
    hp = cfg.hyperparameters
    return FedConfig(
        num_classes=num_classes,
        seed=seed,
        rounds=hp.rounds,
        local_epochs=hp.local_epochs,
        head_epochs=hp.head_epochs,
        batch_size=hp.batch_size,
        lr=hp.lr,
        head_lr=hp.head_lr,
        phi=hp.phi,
        rho=hp.rho,
        latent_dim=hp.latent_dim,
        extractor_hidden=tuple(hp.extractor_hidden),
        classifier_hidden=tuple(hp.classifier_hidden),
        adaptor_depth=hp.adaptor_depth,
        cost_mode=hp.cost_mode,
        sample_weighting=hp.sample_weighting,
        confidence_threshold=hp.confidence_threshold,
        renormalize_prototypes=hp.renormalize_prototypes,
        centre_prototypes=hp.centre_prototypes,
        transport_direction=hp.transport_direction,
        noise=NoiseConfig(cfg.noise.kappa, cfg.noise.target, seed),
        prototype_update=cfg.ablation.prototype_update,
        prototype_learning=cfg.ablation.prototype_learning,
        mixed_prior=cfg.ablation.mixed_prior,
        gated_aggregation=cfg.ablation.gated_aggregation,
        transport=cfg.transport,
        timeout=cfg.timeout_seconds,
    )


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def trained_classes(scenario: Scenario) -> np.ndarray:
    return np.unique(scenario.aligned_labels)


def unseen_classes(scenario: Scenario) -> list[int]:
    seen = set(trained_classes(scenario).tolist())
    return [z for z in range(scenario.num_classes) if z not in seen]


def predict_federation(state: FedState, scenario: Scenario, inference: str, dim: int) -> np.ndarray:
    reps = [represent(p.extractor, block.features, dim) for p, block in zip(state.parties, scenario.test_blocks)]
    if inference == "prototype_nn":
        return prototype_nn_predict(forward_head(state.head, reps).adapted, state.prototypes)
    return predict_softmax(state.head, reps, trained_classes(scenario))


def evaluate_attack(state: FedState, scenario: Scenario, dim: int) -> dict[int, float]:
    """Label-inference accuracy of every passive party against its received prototypes."""
    out: dict[int, float] = {}
    for party, data in zip(state.parties, scenario.parties):
        if data.is_active or party.received_prototypes is None:
            continue
        reps = represent(party.extractor, data.aligned, dim)
        out[party.party_id] = label_inference_attack(reps, party.received_prototypes, scenario.aligned_labels)
    return out


def _score(method: str, predicted: np.ndarray, scenario: Scenario) -> MethodResult:
    labels = scenario.test.labels
    recall = per_class_recall(predicted, labels, scenario.num_classes)
    unseen = unseen_classes(scenario)
    unseen_values = [recall[z] for z in unseen if recall[z] is not None]
    return MethodResult(
        method=method,
        accuracy=accuracy(predicted, labels),
        per_class_recall=recall,
        unseen_classes=unseen,
        unseen_class_recall=float(np.mean(unseen_values)) if unseen_values else None,
    )


def _masked_argmax(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    mask = np.full(logits.shape[1], -np.inf)
    mask[allowed] = 0.0
    return np.argmax(logits + mask, axis=1)


def evaluate_proto_evfl(
    cfg: ExperimentConfig, scenario: Scenario, fed_cfg: FedConfig
) -> tuple[MethodResult, FedState]:
    dim = fed_cfg.latent_dim
    round_acc: dict[int, float] = {}

    def _track(state: FedState) -> None:
        if state.t > 0:
            round_acc[state.t] = accuracy(predict_federation(state, scenario, cfg.inference, dim), scenario.test.labels)

    state = run_federation_sync(scenario, fed_cfg, make_transport(fed_cfg.transport, fed_cfg.timeout), _track)
    result = _score("proto_evfl", predict_federation(state, scenario, cfg.inference, dim), scenario)
    cost = comm_cost(state.comm_log)
    accs = [round_acc[r] for r in sorted(round_acc)]
    best_round = int(np.argmax(accs)) + 1 if accs else None
    bytes_to_best = (
        sum(b for r, b in cost.per_round.items() if r <= best_round) if best_round is not None else None
    )
    attack = evaluate_attack(state, scenario, dim) if cfg.attack else {}
    return result.model_copy(
        update=dict(
            comm_bytes=cost.total,
            comm_per_round=cost.per_round,
            round_accuracy=accs,
            rounds_to_best=best_round,
            bytes_to_best=bytes_to_best,
            loss_curve=list(state.loss_history),
            attack=attack,
            attack_mean=float(np.mean(list(attack.values()))) if attack else None,
            error_log=list(state.error_log),
            digest=state_digest(state),
        )
    ), state


def evaluate_method(method: str, cfg: ExperimentConfig, scenario: Scenario, fed_cfg: FedConfig) -> MethodResult:
    allowed = trained_classes(scenario)
    if method == "proto_evfl":
        result, _ = evaluate_proto_evfl(cfg, scenario, fed_cfg)
        return result
    if method == "local":
        params = train_local(scenario.active, fed_cfg)
        logits, _ = mlp_forward(params, scenario.test_blocks[0].features)
        return _score(method, _masked_argmax(logits, allowed), scenario)
    if method == "vanilla_vfl":
        model = train_vanilla_vfl(scenario.parties, fed_cfg)
        blocks = [b.features for b in scenario.test_blocks]
        return _score(method, predict_vanilla(model, blocks, allowed), scenario)
    if method == "upper_boundary":
        features, labels = upper_boundary_rows(scenario)
        params = train_upper_boundary(features, labels, fed_cfg)
        return _score(method, predict_classifier(params, scenario.test.features), scenario)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def _mean_or_none(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


SeedCallback = Callable[[int, Scenario, Optional[FedState]], None]


def run_seed(cfg: ExperimentConfig, seed: int, on_seed: Optional[SeedCallback] = None) -> SeedResult:
    scenario = build_scenario(cfg, seed)
    fed_cfg = fed_config_for(cfg, seed, scenario.num_classes)
    report = imbalance_report(scenario)
    methods: dict[str, MethodResult] = {}
    fed_state: Optional[FedState] = None
    for method in [cfg.method, *cfg.compare_with]:
        if method == "proto_evfl":
            methods[method], fed_state = evaluate_proto_evfl(cfg, scenario, fed_cfg)
        else:
            methods[method] = evaluate_method(method, cfg, scenario, fed_cfg)
        logger.info(
            "Method evaluated",
            extra={"seed": seed, "method": method, "accuracy": methods[method].accuracy},
        )
    if on_seed is not None:
        on_seed(seed, scenario, fed_state)
    return SeedResult(
        seed=seed,
        imbalance=ImbalanceSummary(
            mid=report.mid,
            wcs=report.wcs,
            party_mid=report.party_mid,
            per_party_counts=report.per_party_counts,
        ),
        methods=methods,
    )


def run_experiment(
    cfg: ExperimentConfig,
    seeds: Optional[Sequence[int]] = None,
    transport: Optional[str] = None,
    on_seed: Optional[SeedCallback] = None,
) -> Report:
    """Run every seed and assemble the report.  Overrides land in the config echo."""
    updates: dict = {}
    if seeds is not None:
        updates["seeds"] = list(seeds)
    if transport is not None:
        updates["transport"] = transport
    if updates:
        cfg = validate_config({**config_echo(cfg), **updates})

    per_seed: list[SeedResult] = []
    timing: dict[str, float] = {}
    for seed in cfg.seeds:
        started = time.perf_counter()
        with seed_context(seed):
            per_seed.append(run_seed(cfg, seed, on_seed))
        timing[f"seed_{seed}_seconds"] = time.perf_counter() - started

    methods = [cfg.method, *cfg.compare_with]
    summary: dict[str, MethodSummary] = {}
    for method in methods:
        accs = [s.methods[method].accuracy for s in per_seed]
        unseen = [s.methods[method].unseen_class_recall for s in per_seed]
        attacks = [s.methods[method].attack_mean for s in per_seed]
        summary[method] = MethodSummary(
            per_seed_accuracy=accs,
            mean_accuracy=float(np.mean(accs)),
            per_seed_unseen_recall=unseen,
            mean_unseen_recall=_mean_or_none(unseen),
            per_seed_attack=attacks,
            mean_attack=_mean_or_none(attacks),
        )
    comparisons = []
    for baseline in cfg.compare_with:
        diffs = [s.methods[cfg.method].accuracy - s.methods[baseline].accuracy for s in per_seed]
        comparisons.append(
            Comparison(
                method=cfg.method,
                baseline=baseline,
                per_seed_difference=diffs,
                mean_difference=float(np.mean(diffs)),
            )
        )
    return Report(
        version=version(),
        config=config_echo(cfg),
        seeds=list(cfg.seeds),
        per_seed=per_seed,
        summary=summary,
        comparisons=comparisons,
        timing=timing,
    )
