"""Proto-EVFL CLI: thin typer wrapper around the experiment runner.

Usage:
    python cli.py run --config experiment.yaml --out report.json
    python cli.py run --config experiment.yaml --out report.json --transport socket --seed-list 1,2,3
    python cli.py metrics --manifest scenario.json
    python cli.py attack --state run.npz
"""
from __future__ import annotations

from pathlib import Path
from typing import NoReturn, Optional

import typer
from rich.console import Console
from rich.table import Table

from core.logging_config import setup_logging

app = typer.Typer(
    name="protoevfl",
    help="Desk-scale vertical federated learning experiments.",
    no_args_is_help=True,
)

console = Console()


def _parse_seeds(raw: Optional[str]) -> Optional[list[int]]:
    if raw is None:
        return None
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        typer.echo(f"--seed-list must be comma-separated integers, got {raw!r}", err=True)
        raise typer.Exit(2)


def _fail(messages: list[str]) -> NoReturn:
    for message in messages:
        typer.echo(f"error: {message}", err=True)
    raise typer.Exit(2)


@app.callback()
def main(log_level: Optional[str] = typer.Option(None, "--log-level", help="Overrides LOG_LEVEL.")) -> None:
    setup_logging(log_level)


@app.command()
def run(
    config: Path = typer.Option(..., "--config", "-c", help="YAML or JSON experiment file."),
    out: Path = typer.Option(..., "--out", "-o", help="Where to write the JSON report."),
    transport: Optional[str] = typer.Option(None, "--transport", help="inproc or socket."),
    seed_list: Optional[str] = typer.Option(None, "--seed-list", help="Comma-separated seeds, e.g. 1,2,3."),
    state_out: Optional[Path] = typer.Option(
        None, "--state-out", help="Save the last seed's Proto-EVFL state (.npz)."
    ),
    manifest_out: Optional[Path] = typer.Option(
        None, "--manifest-out", help="Save the last seed's scenario manifest (.json)."
    ),
) -> None:
    """Run an experiment and write its report."""
    from config import load_config
    from core.errors import ConfigError, DomainError, IngestionError, ScenarioError, SpecError, TransportError
    from core.experiment import run_experiment, write_report
    from core.federation import save_state
    from core.scenario import build_manifest, save_manifest

    def _artifacts(seed, scenario, state) -> None:
        if manifest_out is not None:
            save_manifest(build_manifest(scenario, seed), manifest_out)
        if state_out is not None and state is not None:
            save_state(state_out, state, scenario)

    try:
        cfg = load_config(config)
        report = run_experiment(cfg, seeds=_parse_seeds(seed_list), transport=transport, on_seed=_artifacts)
        write_report(report, out)
    except ConfigError as exc:
        _fail(exc.errors)
    except (IngestionError, ScenarioError, SpecError, DomainError, TransportError, OSError) as exc:
        _fail([str(exc)])

    table = Table(title=f"Report -> {out}")
    table.add_column("method")
    table.add_column("mean accuracy", justify="right")
    table.add_column("per seed")
    table.add_column("unseen recall", justify="right")
    for method, summary in report.summary.items():
        unseen = summary.mean_unseen_recall
        table.add_row(
            method,
            f"{summary.mean_accuracy:.4f}",
            " ".join(f"{a:.3f}" for a in summary.per_seed_accuracy),
            "-" if unseen is None else f"{unseen:.4f}",
        )
    console.print(table)
    for comp in report.comparisons:
        console.print(f"{comp.method} - {comp.baseline}: mean difference {comp.mean_difference:+.4f}")


@app.command()
def metrics(
    manifest: Path = typer.Option(..., "--manifest", "-m", help="Scenario manifest JSON."),
) -> None:
    """Print MID / WCS of a saved scenario."""
    from core.errors import DomainError
    from core.scenario import load_manifest, manifest_report

    try:
        report = manifest_report(load_manifest(manifest))
    except DomainError as exc:
        _fail([str(exc)])

    table = Table(title=f"Imbalance of {manifest.name}")
    table.add_column("party")
    table.add_column("class counts")
    table.add_column("MID", justify="right")
    for m, counts in report.per_party_counts.items():
        party_mid = report.party_mid[m]
        table.add_row(str(m), str(counts), "-" if party_mid is None else f"{party_mid:.4f}")
    console.print(table)
    console.print(f"global MID {report.mid:.6f}  WCS {report.wcs:.6f}")


@app.command()
def attack(
    state: Path = typer.Option(..., "--state", "-s", help="Saved federation state (.npz)."),
) -> None:
    """Label-inference attack by every passive party against its received prototypes."""
    import numpy as np

    from core.federation import load_state
    from core.privacy import label_inference_attack
    from workers.party import represent

    if not state.exists():
        _fail([f"state file not found: {state}"])
    saved = load_state(state)
    if saved.aligned_labels is None or not saved.aligned_blocks:
        _fail(["state file carries no aligned rows; save it with the scenario"])

    scores: dict[int, float] = {}
    for party in saved.state.parties:
        if party.party_id == 1 or party.received_prototypes is None:
            continue
        block = saved.aligned_blocks.get(party.party_id)
        if block is None:
            continue
        reps = represent(party.extractor, block, party.received_prototypes.dim)
        scores[party.party_id] = label_inference_attack(reps, party.received_prototypes, saved.aligned_labels)

    if not scores:
        _fail(["no passive party received prototypes"])
    table = Table(title=f"Label inference on {state.name}")
    table.add_column("party")
    table.add_column("attack accuracy", justify="right")
    for m, score in scores.items():
        table.add_row(str(m), f"{score:.4f}")
    console.print(table)
    console.print(f"mean {float(np.mean(list(scores.values()))):.4f}")


if __name__ == "__main__":
    app()
