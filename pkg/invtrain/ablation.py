"""Ablation grid: every loss configuration, at several shot counts, over several seeds."""

import io
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from astropy.io import ascii as astropy_ascii
from astropy.table import Table

from invtrain.config.settings import get_settings
from invtrain.config.storage import atomic_writer
from invtrain.datagen import MANIFEST_NAME, generate_dataset, load_manifest
from invtrain.schemas import AblationMode, TrainConfig
from invtrain.train import train_run

logger = logging.getLogger(__name__)

ABLATION_MODES = (AblationMode.V1, AblationMode.V2, AblationMode.V3, AblationMode.FULL)


class AblationCell(NamedTuple):
    """One training run of the grid."""

    mode: AblationMode
    shots: int
    seed: int


def ablation_grid(modes: Sequence[AblationMode], shots: Sequence[int], seeds: Sequence[int]) -> list[AblationCell]:
    """Cells in (mode, shots, seed) order."""
    if not modes or not shots or not seeds:
        raise ValueError("the ablation grid needs at least one mode, one shot count and one seed")
    return [AblationCell(AblationMode(mode), int(k), int(seed)) for mode in modes for k in shots for seed in seeds]


def shot_dataset(data_dir, shots: int) -> Path:
    """Dataset with ``shots`` training chips per class: the base one, or ``<data>/shots-<K>/``.

    Missing shot datasets are generated from the base dataset's ChipSpec.
    """
    data_dir = Path(data_dir)
    spec = load_manifest(data_dir).spec
    if spec.shots_per_class == shots:
        return data_dir
    target = data_dir / f"shots-{shots}"
    if not (target / MANIFEST_NAME).exists():
        logger.info("generating the %d-shot dataset in %s", shots, target)
        generate_dataset(spec.model_copy(update={"shots_per_class": shots}), target)
    return target


def _run_cell(config: TrainConfig, data_dir: Path, run_dir: Path, cell: AblationCell) -> dict:
    cell_config = config.model_copy(update={"mode": cell.mode, "seed": cell.seed})
    result = train_run(cell_config, data_dir, run_dir / f"{cell.mode}-{cell.shots}-{cell.seed}")
    row = {"mode": str(cell.mode), "shots": cell.shots, "seed": cell.seed, "accuracy": result.metrics.accuracy}
    for label, value in enumerate(result.metrics.per_class_accuracy):
        row[f"acc_class_{label}"] = value
    logger.info("%s shots=%d seed=%d accuracy %.4f", cell.mode, cell.shots, cell.seed, result.metrics.accuracy)
    return row


def _run_cell_packed(arguments) -> dict:
    return _run_cell(*arguments)


def summarize(results: Table) -> Table:
    """Mean and sample standard deviation of the accuracy per (mode, shots)."""
    rows = []
    for group in results.group_by(["mode", "shots"]).groups:
        accuracy = np.asarray(group["accuracy"], dtype=np.float64)
        rows.append(
            (
                str(group["mode"][0]),
                int(group["shots"][0]),
                len(accuracy),
                float(accuracy.mean()),
                float(accuracy.std(ddof=1)) if len(accuracy) > 1 else 0.0,
            )
        )
    return Table(rows=rows, names=("mode", "shots", "runs", "mean_accuracy", "std_accuracy"))


def _write_csv(table: Table, path: Path) -> None:
    buffer = io.StringIO()
    astropy_ascii.write(table, buffer, format="csv")
    with atomic_writer(path) as handle:
        handle.write(buffer.getvalue())


def summary_path(out_csv) -> Path:
    out_csv = Path(out_csv)
    return out_csv.with_name(f"{out_csv.stem}_summary.csv")


def ablate(
    config: TrainConfig,
    data_dir,
    shots: Sequence[int],
    seeds: Sequence[int],
    out_csv,
    modes: Optional[Sequence[AblationMode]] = None,
) -> Table:
    """Train every cell of modes x shots x seeds; write the per-run CSV and its summary.

    Runs go to ``<out_csv stem>_runs/`` next to the CSV. With INVTRAIN_THREADS > 1 the
    cells are spread over a process pool; rows keep grid order either way.
    """
    out_csv = Path(out_csv)
    cells = ablation_grid(modes or ABLATION_MODES, shots, seeds)
    datasets = {k: shot_dataset(data_dir, k) for k in dict.fromkeys(cell.shots for cell in cells)}
    run_dir = out_csv.with_name(f"{out_csv.stem}_runs")
    jobs = [(config, datasets[cell.shots], run_dir, cell) for cell in cells]

    workers = min(get_settings().INVTRAIN_THREADS, len(jobs))
    logger.info("running %d ablation cells on %d worker(s)", len(jobs), workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell_packed, jobs))
    else:
        rows = [_run_cell_packed(job) for job in jobs]

    names = list(rows[0])
    results = Table(rows=[[row[name] for name in names] for row in rows], names=names)
    _write_csv(results, out_csv)
    _write_csv(summarize(results), summary_path(out_csv))
    return results
