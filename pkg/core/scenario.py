"""Class-imbalance scenarios, imbalance reports and scenario manifests.

Transforms only ever touch training pools.  ``Scenario.test`` is carried
through untouched so every method is scored on the same held-out rows.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal

import numpy as np

from core.data import PartyDataset, Scenario
from core.errors import DomainError, ScenarioError
from core.metrics import class_counts, mid, wcs
from core.numerics import rng_for

logger = logging.getLogger(__name__)

RareMode = Literal["few_shot", "zero_shot"]

_STREAM_MAJORITY = 21
_STREAM_SUBSAMPLE = 22
_STREAM_FEW_SHOT = 23

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class RareClass:
    class_id: int
    mode: RareMode
    keep_count: int = 1

    def __post_init__(self) -> None:
        if self.mode == "few_shot" and self.keep_count < 1:
            raise DomainError(f"few_shot class {self.class_id} needs keep_count >= 1")


@dataclass(frozen=True)
class ImbalanceSpec:
    gamma: float = 1.0
    rare_classes: tuple[RareClass, ...] = ()
    num_majority: int | None = None     # None -> Z // 2
    seed: int | None = None             # majority-class assignment seed; None -> run seed


@dataclass(frozen=True)
class ImbalanceReport:
    mid: float
    wcs: float
    party_mid: dict[int, float | None]
    per_party_counts: dict[int, list[int]]
    global_counts: list[int] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def _subsample(rows: np.ndarray, keep: int, rng: np.random.Generator) -> np.ndarray:
    if keep >= len(rows):
        return rows
    return np.sort(rng.choice(rows, size=keep, replace=False))


def _select_aligned(scenario: Scenario, rare: tuple[RareClass, ...], seed: int) -> np.ndarray:
    labels = scenario.aligned_labels
    keep = np.ones(len(labels), dtype=bool)
    deficit: dict[int, int] = {}
    for rc in rare:
        rows = np.flatnonzero(labels == rc.class_id)
        if rc.mode == "zero_shot":
            keep[rows] = False
            continue
        if len(rows) < rc.keep_count:
            deficit[rc.class_id] = rc.keep_count - len(rows)
            continue
        chosen = _subsample(rows, rc.keep_count, rng_for(seed, _STREAM_FEW_SHOT, rc.class_id))
        keep[rows] = False
        keep[chosen] = True
    if deficit:
        raise ScenarioError(
            f"few-shot classes lack aligned rows: {deficit}", {1: deficit}
        )
    return np.flatnonzero(keep)


def apply_imbalance(scenario: Scenario, spec: ImbalanceSpec, seed: int) -> Scenario:
    """Apply rare-class modes to the aligned pool and Γ to every unaligned pool.

    Each party draws its own majority classes.  Majority classes are cut to
    the smallest majority count n_maj, every other class to round(n_maj / Γ).
    """
    z = scenario.num_classes
    for rc in spec.rare_classes:
        if not 0 <= rc.class_id < z:
            raise DomainError(f"rare class {rc.class_id} outside [0, {z})")
    if spec.gamma < 1.0:
        raise DomainError(f"gamma must be >= 1, got {spec.gamma}")
    num_majority = spec.num_majority if spec.num_majority is not None else max(1, z // 2)
    if not 1 <= num_majority <= z:
        raise DomainError(f"num_majority must be in [1, {z}], got {num_majority}")
    assign_seed = spec.seed if spec.seed is not None else seed

    keep_aligned = _select_aligned(scenario, spec.rare_classes, seed)

    new_pools: dict[int, np.ndarray] = {}
    deficits: dict[int, dict[int, int]] = {}
    majority_sets: dict[int, list[int]] = {}
    for party in scenario.parties:
        m = party.party_id
        pool_labels = scenario.unaligned_labels[m]
        if spec.gamma == 1.0 or len(pool_labels) == 0:
            new_pools[m] = np.arange(len(pool_labels))
            continue
        majority = np.sort(rng_for(assign_seed, _STREAM_MAJORITY, m).choice(z, size=num_majority, replace=False))
        majority_sets[m] = majority.tolist()
        counts = class_counts(pool_labels, z)
        n_maj = int(counts[majority].min())
        n_min = int(round(n_maj / spec.gamma))
        rng = rng_for(seed, _STREAM_SUBSAMPLE, m)
        kept: list[np.ndarray] = []
        for cls in range(z):
            rows = np.flatnonzero(pool_labels == cls)
            target = n_maj if cls in majority else n_min
            if len(rows) < target:
                deficits.setdefault(m, {})[cls] = target - len(rows)
                continue
            kept.append(_subsample(rows, target, rng))
        new_pools[m] = np.sort(np.concatenate(kept)) if kept else np.zeros(0, dtype=np.int64)

    if deficits:
        raise ScenarioError(f"imbalance ratio {spec.gamma} not achievable: {deficits}", deficits)

    parties = []
    unaligned_labels: dict[int, np.ndarray] = {}
    for party in scenario.parties:
        idx = new_pools[party.party_id]
        parties.append(
            replace(
                party,
                aligned=party.aligned[keep_aligned],
                aligned_ids=party.aligned_ids[keep_aligned],
                unaligned=party.unaligned[idx],
                unaligned_ids=party.unaligned_ids[idx],
                labels_aligned=(
                    party.labels_aligned[keep_aligned] if party.labels_aligned is not None else None
                ),
            )
        )
        unaligned_labels[party.party_id] = scenario.unaligned_labels[party.party_id][idx]

    meta = dict(scenario.meta)
    meta.update(
        gamma=spec.gamma,
        majority_classes={str(k): v for k, v in majority_sets.items()},
        rare_classes=[
            {"class_id": rc.class_id, "mode": rc.mode, "keep_count": rc.keep_count}
            for rc in spec.rare_classes
        ],
    )
    logger.info(
        "Imbalance applied",
        extra={"gamma": spec.gamma, "aligned_rows": int(len(keep_aligned)), "rare": len(spec.rare_classes)},
    )
    return replace(
        scenario,
        parties=tuple(parties),
        aligned_labels=scenario.aligned_labels[keep_aligned],
        unaligned_labels=unaligned_labels,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def party_class_counts(scenario: Scenario) -> dict[int, list[int]]:
    """Per-party label counts over aligned + unaligned rows (oracle view)."""
    z = scenario.num_classes
    aligned = class_counts(scenario.aligned_labels, z)
    return {
        p.party_id: (aligned + class_counts(scenario.unaligned_labels[p.party_id], z)).tolist()
        for p in scenario.parties
    }


def report_from_counts(per_party_counts: dict[int, list[int]]) -> ImbalanceReport:
    if not per_party_counts:
        raise DomainError("no parties to report on")
    global_counts = np.sum([np.asarray(c) for c in per_party_counts.values()], axis=0)
    party_mid: dict[int, float | None] = {}
    for m, counts in per_party_counts.items():
        party_mid[m] = mid(counts) if sum(counts) > 0 else None
    return ImbalanceReport(
        mid=mid(global_counts.tolist()),
        wcs=wcs(global_counts.tolist(), list(per_party_counts.values())),
        party_mid=party_mid,
        per_party_counts={m: list(map(int, c)) for m, c in per_party_counts.items()},
        global_counts=global_counts.astype(int).tolist(),
    )


def imbalance_report(scenario: Scenario) -> ImbalanceReport:
    return report_from_counts(party_class_counts(scenario))


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def _id_list(ids: np.ndarray) -> list[Any]:
    return [v.item() if hasattr(v, "item") else v for v in ids]


def build_manifest(scenario: Scenario, seed: int) -> dict[str, Any]:
    """JSON-ready record of the realized partition."""
    return {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "num_classes": scenario.num_classes,
        "meta": scenario.meta,
        "aligned_ids": _id_list(scenario.active.aligned_ids),
        "parties": [
            {
                "party_id": p.party_id,
                "columns": list(p.columns),
                "unaligned_ids": _id_list(p.unaligned_ids),
            }
            for p in scenario.parties
        ],
        "test_ids": _id_list(scenario.test.ids) if scenario.test is not None else [],
        "per_party_counts": {str(m): c for m, c in party_class_counts(scenario).items()},
    }


def save_manifest(manifest: dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def load_manifest(path: str | Path) -> dict[str, Any]:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DomainError(f"cannot read manifest {path}: {exc}") from exc
    if "per_party_counts" not in manifest:
        raise DomainError(f"manifest {path} has no per_party_counts")
    return manifest


def manifest_report(manifest: dict[str, Any]) -> ImbalanceReport:
    counts = {int(m): list(c) for m, c in manifest["per_party_counts"].items()}
    return report_from_counts(dict(sorted(counts.items())))
