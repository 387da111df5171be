"""Synthetic single-channel chips with a class-correlated clutter confounder.

A chip is a textured class target near the centre plus the clutter patch of
one environment in a corner, multiplied by gamma speckle and lifted by a small
exponential noise floor. In the training split a class draws its home
environment with probability ``confound_strength``; the test split draws
environments uniformly, so the clutter shortcut stops paying off.
"""

import logging
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from invtrain.config.storage import atomic_writer
from invtrain.exceptions import DatasetIOError
from invtrain.schemas import ChipSpec, DatasetManifest, Diagnostics, SampleRecord, Split

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TENSOR_DTYPE = np.dtype("<f4")

TEMPLATE_STREAM = 1
CLUTTER_STREAM = 2
SAMPLE_STREAM = 3
ASSIGNMENT_STREAM = 4

# grating periods in pixels at side 32, scaled with the side
TARGET_PERIODS = (5.0, 7.0)
TARGET_RADIUS = 0.25
TARGET_BASE = 0.2


def _rng(spec: ChipSpec, stream: int, index: int) -> np.random.Generator:
    """Independent substream per (seed, purpose, index) so generation order never matters."""
    return np.random.default_rng([spec.seed, stream, index])


def class_template(label: int, spec: ChipSpec, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Target of one class: a disc near the centre filled with a grating, peak intensity 1.

    Grating orientation and period depend on the class, so the class stays visible in
    spatially pooled local features; the phase is drawn once per class.
    """
    side = spec.side
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    rows -= (side - 1) / 2 + offset[0]
    cols -= (side - 1) / 2 + offset[1]
    angle = np.pi * label / spec.num_classes
    period = TARGET_PERIODS[label % len(TARGET_PERIODS)] * side / 32
    phase = _rng(spec, TEMPLATE_STREAM, label).uniform(0, 2 * np.pi)
    grating = 0.5 * (1.0 + np.cos(2 * np.pi * (rows * np.cos(angle) + cols * np.sin(angle)) / period + phase))
    inside = np.hypot(rows, cols) <= side * TARGET_RADIUS
    return np.where(inside, TARGET_BASE + (1.0 - TARGET_BASE) * grating, 0.0)


def clutter_patch(env: int, spec: ChipSpec) -> np.ndarray:
    """Fine striped clutter in the corner ``env % 4``; stripe orientation and period vary with ``env``."""
    side = spec.side
    patch = side // 4
    rng = _rng(spec, CLUTTER_STREAM, env)
    angle = rng.uniform(0, np.pi)
    period = 2.0 + env % 3
    rows, cols = np.mgrid[0:patch, 0:patch]
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 * (1.0 + np.sin(2 * np.pi * (rows * np.cos(angle) + cols * np.sin(angle)) / period + phase))

    image = np.zeros((side, side))
    corner = env % 4
    top = 1 if corner in (0, 1) else side - patch - 1
    left = 1 if corner in (0, 2) else side - patch - 1
    image[top : top + patch, left : left + patch] = spec.clutter_amplitude * stripes
    return image


def expected_chip(label: int, env: int, spec: ChipSpec) -> np.ndarray:
    """Analytic per-pixel mean of an unjittered chip (speckle has mean 1)."""
    return class_template(label, spec) + clutter_patch(env, spec) + spec.noise_floor


def generate_chip(label: int, env: int, spec: ChipSpec, rng: np.random.Generator) -> np.ndarray:
    """One chip of shape [1, side, side], all pixels >= 0."""
    if not 0 <= label < spec.num_classes:
        raise ValueError(f"label {label} is out of range")
    if not 0 <= env < spec.num_classes:
        raise ValueError(f"environment {env} is out of range")
    offset = tuple(rng.integers(-spec.jitter, spec.jitter + 1, size=2)) if spec.jitter else (0, 0)
    clean = class_template(label, spec, offset) + clutter_patch(env, spec)
    if spec.speckle_looks is not None:
        looks = spec.speckle_looks
        clean = clean * rng.gamma(shape=looks, scale=1.0 / looks, size=clean.shape)
    if spec.noise_floor > 0:
        clean = clean + rng.exponential(spec.noise_floor, size=clean.shape)
    return clean[None, :, :]


def draw_environment(label: int, spec: ChipSpec, rng: np.random.Generator, split: Split) -> int:
    """Home environment with probability confound_strength (train), else uniform over the others."""
    if split == Split.TEST:
        return int(rng.integers(spec.num_classes))
    home = label
    if rng.random() < spec.confound_strength:
        return home
    others = [env for env in range(spec.num_classes) if env != home]
    return int(others[rng.integers(len(others))])


def generate_dataset(spec: ChipSpec, out_dir) -> DatasetManifest:
    """Write ``manifest.json`` and the raw float32 tensor file into ``out_dir``."""
    out_dir = Path(out_dir)
    assignment = _rng(spec, ASSIGNMENT_STREAM, 0)
    plan = [
        (split, label)
        for split, per_class in ((Split.TRAIN, spec.shots_per_class), (Split.TEST, spec.test_per_class))
        for label in range(spec.num_classes)
        for _ in range(per_class)
    ]
    environments = [draw_environment(label, spec, assignment, split) for split, label in plan]

    chip_bytes = spec.side * spec.side * TENSOR_DTYPE.itemsize
    records = []
    chips = np.empty((len(plan), 1, spec.side, spec.side), dtype=TENSOR_DTYPE)
    for sample_id, ((split, label), env) in enumerate(zip(plan, environments)):
        chips[sample_id] = generate_chip(label, env, spec, _rng(spec, SAMPLE_STREAM, sample_id))
        records.append(SampleRecord(sample_id=sample_id, split=split, label=label, offset=sample_id * chip_bytes))

    payload = chips.tobytes(order="C")
    tensor_file = "chips.f32"
    manifest = DatasetManifest(
        spec=spec,
        splits={
            Split.TRAIN: spec.shots_per_class * spec.num_classes,
            Split.TEST: spec.test_per_class * spec.num_classes,
        },
        records=records,
        tensor_file=tensor_file,
        checksum=zlib.crc32(payload),
        diagnostics=Diagnostics(home_environments=list(range(spec.num_classes)), environments=environments),
    )
    try:
        with atomic_writer(out_dir / tensor_file, "wb") as handle:
            handle.write(payload)
        with atomic_writer(out_dir / MANIFEST_NAME) as handle:
            handle.write(manifest.model_dump_json(indent=2))
    except OSError as exc:
        raise DatasetIOError(f"cannot write dataset to {out_dir}: {exc}") from exc
    logger.info(
        "wrote %d chips (%d train, %d test) to %s",
        len(records),
        manifest.splits[Split.TRAIN],
        manifest.splits[Split.TEST],
        out_dir,
    )
    return manifest


def load_manifest(data_dir) -> DatasetManifest:
    path = Path(data_dir) / MANIFEST_NAME
    try:
        return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetIOError(f"cannot read manifest {path}: {exc}") from exc


def read_tensor_file(data_dir, manifest: Optional[DatasetManifest] = None) -> np.ndarray:
    """Every chip as float32 [N, 1, side, side], after checking the CRC-32."""
    manifest = manifest or load_manifest(data_dir)
    path = Path(data_dir) / manifest.tensor_file
    try:
        payload = path.read_bytes()
    except OSError as exc:
        raise DatasetIOError(f"cannot read tensor file {path}: {exc}") from exc
    if zlib.crc32(payload) != manifest.checksum:
        raise DatasetIOError(f"checksum mismatch for {path}")
    side = manifest.spec.side
    expected = len(manifest.records) * side * side * TENSOR_DTYPE.itemsize
    if len(payload) != expected:
        raise DatasetIOError(f"{path} holds {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=TENSOR_DTYPE).reshape(len(manifest.records), 1, side, side)


def load_split(data_dir, split: Split, manifest: Optional[DatasetManifest] = None):
    """(images float64 [n,1,side,side], labels, sample_ids) of one split; environment ids stay out."""
    manifest = manifest or load_manifest(data_dir)
    chips = read_tensor_file(data_dir, manifest)
    chosen = [record for record in manifest.records if record.split == Split(split)]
    ids = np.array([record.sample_id for record in chosen], dtype=np.int64)
    labels = np.array([record.label for record in chosen], dtype=np.int64)
    return chips[ids].astype(np.float64), labels, ids


def load_diagnostics(data_dir) -> Diagnostics:
    """Environment bookkeeping, for analysis only."""
    return load_manifest(data_dir).diagnostics
