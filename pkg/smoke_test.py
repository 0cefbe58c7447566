"""Proto-EVFL smoke test.

Runs one small synthetic imbalanced scenario end to end (Proto-EVFL plus
every baseline) and prints per-method accuracy, communication bytes and the
realized MID / WCS.

Usage:
    python smoke_test.py                      # seed 0, 5 rounds, inproc
    python smoke_test.py --seeds 0 1 2
    python smoke_test.py --rounds 30 --gamma 10 --transport socket

Flags:
    --seeds N [N ...]   seeds to run (default: 0)
    --rounds T          federation rounds (default: 5)
    --gamma G           majority:minority ratio (default: 10)
    --zero-shot Z       drop class Z from the aligned labels
    --transport KIND    inproc or socket (default: inproc)
    --attack            also score the label-inference attack
"""
from __future__ import annotations

import argparse
import os
import sys

# ── path setup ───────────────────────────────────────────────────────────────
sys.path.insert(0, os.path.dirname(__file__))

from config import validate_config
from core.errors import ConfigError, ScenarioError
from core.experiment import run_experiment
from core.logging_config import setup_logging


def build_raw(args: argparse.Namespace) -> dict:
    rare = [{"class_id": args.zero_shot, "mode": "zero_shot"}] if args.zero_shot is not None else []
    return {
        "dataset": {"source": "synth", "num_features": 16, "per_class": [1500, 1500, 1500, 1500]},
        "seeds": args.seeds,
        "aligned_ratio": 0.02,
        "imbalance": {"gamma": args.gamma, "rare_classes": rare},
        "hyperparameters": {"rounds": args.rounds},
        "compare_with": ["local", "vanilla_vfl", "upper_boundary"],
        "inference": "prototype_nn" if args.zero_shot is not None else "softmax",
        "attack": args.attack,
        "transport": args.transport,
    }


def main() -> int:
    parser = argparse.ArgumentParser(description="Desk-scale Proto-EVFL smoke run")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--rounds", type=int, default=5)
    parser.add_argument("--gamma", type=float, default=10.0)
    parser.add_argument("--zero-shot", type=int, default=None)
    parser.add_argument("--transport", choices=["inproc", "socket"], default="inproc")
    parser.add_argument("--attack", action="store_true")
    args = parser.parse_args()

    setup_logging("WARNING")
    try:
        report = run_experiment(validate_config(build_raw(args)))
    except ConfigError as exc:
        for message in exc.errors:
            print(f"config: {message}", file=sys.stderr)
        return 2
    except ScenarioError as exc:
        print(f"scenario: {exc}", file=sys.stderr)
        return 2

    for seed_result in report.per_seed:
        imb = seed_result.imbalance
        print(f"\n{'='*60}")
        print(f"  Seed   : {seed_result.seed}")
        print(f"  MID    : {imb.mid:.4f}    WCS: {imb.wcs:.4f}")
        print(f"{'='*60}")
        for method, result in seed_result.methods.items():
            comm = f"{result.comm_bytes:,} B" if result.comm_bytes is not None else "-"
            print(f"  {method:<16} acc {result.accuracy:.4f}   comm {comm}")
            if result.unseen_class_recall is not None:
                print(f"  {'':<16} unseen-class recall {result.unseen_class_recall:.4f}")
            if result.attack_mean is not None:
                print(f"  {'':<16} attack accuracy {result.attack_mean:.4f}")
            if result.error_log:
                print(f"  {'':<16} errors: {'; '.join(result.error_log)}")

    print(f"\n{'='*60}")
    for comp in report.comparisons:
        print(f"  {comp.method} - {comp.baseline}: {comp.mean_difference:+.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
