"""Command line entry point: ``invtrain gen-data | train | ablate | eval | scm-check``.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 divergence guard.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import click
from pydantic import ValidationError

from invtrain.ablation import ablate as run_ablation
from invtrain.ablation import summary_path
from invtrain.config.logging import configure_logging
from invtrain.config.storage import atomic_writer
from invtrain.datagen import generate_dataset
from invtrain.exceptions import DivergenceError, InvTrainError
from invtrain.schemas import ChipSpec, DagDocument, Split, TrainConfig
from invtrain.services import perform_scm_check
from invtrain.train import evaluate as evaluate_checkpoint
from invtrain.train import train_run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_DIVERGENCE = 3

CONTEXT_SETTINGS = {"help_option_names": ["-h", "--help"]}


def _read_json(path: Path, schema):
    return schema.model_validate_json(path.read_text(encoding="utf-8"))


def _parse_shots(_ctx, _param, value: str) -> list[int]:
    try:
        shots = [int(part) for part in value.split(",") if part.strip()]
    except ValueError as exc:
        raise click.BadParameter("expected a comma-separated list of integers, e.g. 5,10,20") from exc
    if not shots or min(shots) < 1:
        raise click.BadParameter("shot counts must be positive")
    return shots


def _echo_json(payload) -> None:
    click.echo(json.dumps(payload, indent=2, sort_keys=True))


existing_file = click.Path(exists=True, dir_okay=False, path_type=Path)
existing_dir = click.Path(exists=True, file_okay=False, path_type=Path)


@click.group(context_settings=CONTEXT_SETTINGS)
def cli():
    """Dual-invariance training on synthetic confounded chips, plus causal checks."""


@cli.command("gen-data")
@click.option("--spec", "spec_path", required=True, type=existing_file, help="ChipSpec JSON.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path), help="Output dir.")
def gen_data(spec_path: Path, out_dir: Path):
    """Generate a synthetic dataset (manifest.json + chips.f32)."""
    manifest = generate_dataset(_read_json(spec_path, ChipSpec), out_dir)
    _echo_json({"out": str(out_dir), "splits": manifest.splits, "checksum": manifest.checksum})


@cli.command()
@click.option("--config", "config_path", required=True, type=existing_file, help="TrainConfig JSON.")
@click.option("--data", "data_dir", required=True, type=existing_dir, help="Dataset directory.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False, path_type=Path), help="Run dir.")
def train(config_path: Path, data_dir: Path, out_dir: Path):
    """Train one network; writes checkpoint.bin, log.jsonl, metrics.json and config.json."""
    result = train_run(_read_json(config_path, TrainConfig), data_dir, out_dir)
    _echo_json({"checkpoint": str(result.checkpoint), "log": str(result.log), "accuracy": result.metrics.accuracy})


@cli.command()
@click.option("--config", "config_path", required=True, type=existing_file, help="TrainConfig JSON (mode ignored).")
@click.option("--data", "data_dir", required=True, type=existing_dir, help="Base dataset directory.")
@click.option("--shots", required=True, callback=_parse_shots, help="Comma-separated shot counts, e.g. 5,10,20.")
@click.option("--seeds", required=True, type=click.IntRange(min=1), help="Number of seeds per cell.")
@click.option("--out", "out_csv", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Result CSV.")
def ablate(config_path: Path, data_dir: Path, shots: list[int], seeds: int, out_csv: Path):
    """Run V1/V2/V3/FULL x shots x seeds and write the result table and its summary."""
    config = _read_json(config_path, TrainConfig)
    table = run_ablation(config, data_dir, shots, list(range(config.seed, config.seed + seeds)), out_csv)
    _echo_json({"rows": len(table), "csv": str(out_csv), "summary": str(summary_path(out_csv))})


@cli.command("eval")
@click.option("--checkpoint", required=True, type=existing_file, help="checkpoint.bin of a run.")
@click.option("--data", "data_dir", required=True, type=existing_dir, help="Dataset directory.")
@click.option("--split", type=click.Choice([s.value for s in Split]), default=Split.TEST.value, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), help="Also write metrics here.")
def evaluate(checkpoint: Path, data_dir: Path, split: str, out_path: Optional[Path]):
    """Evaluate a checkpoint on one split and print the metrics."""
    metrics = evaluate_checkpoint(checkpoint, data_dir, Split(split))
    if out_path is not None:
        with atomic_writer(out_path) as handle:
            handle.write(metrics.model_dump_json(indent=2))
    click.echo(metrics.model_dump_json(indent=2))


@cli.command("scm-check")
@click.option("--graph", "graph_path", required=True, type=existing_file, help="DAG JSON document.")
@click.option("--treatment", required=True, help="Treatment node X.")
@click.option("--outcome", required=True, help="Outcome node Y.")
@click.option("--adjust", default="", help="Comma-separated adjustment set (may be empty).")
@click.option("--value", type=click.IntRange(min=0), default=None, help="Treatment state; all states when omitted.")
def scm_check(graph_path: Path, treatment: str, outcome: str, adjust: str, value: Optional[int]):
    """Check the backdoor criterion and compare the adjusted estimate with the oracle."""
    adjust_set = [name.strip() for name in adjust.split(",") if name.strip()]
    report = perform_scm_check(_read_json(graph_path, DagDocument), treatment, outcome, adjust_set, value)
    click.echo(report.model_dump_json(indent=2))


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return its exit code."""
    configure_logging()
    try:
        code = cli.main(args=list(argv) if argv is not None else None, prog_name="invtrain", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except DivergenceError as exc:
        logger.error("training diverged: %s", exc)
        return EXIT_DIVERGENCE
    except (InvTrainError, OSError, ValidationError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return code if isinstance(code, int) else EXIT_OK


def run() -> None:
    """Console-script wrapper."""
    sys.exit(main())
