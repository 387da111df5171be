"""Training loop, loss composition and evaluation metrics."""

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from invtrain import autodiff as ad
from invtrain.autodiff import EPSILON_NORM, Tensor
from invtrain.config.storage import atomic_writer
from invtrain.datagen import load_manifest, load_split
from invtrain.exceptions import DivergenceError, LabelOutOfRangeError, ShapeMismatchError, UninitializedError
from invtrain.models import Network, load_checkpoint, predict_batch, save_checkpoint
from invtrain.nil import nil_loss
from invtrain.proxy import BatchGroup, ProxyBank, init_proxies, proxy_loss, usable_rows
from invtrain.schemas import AblationMode, FeatureSeparation, Metrics, Split, TrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "log.jsonl"
METRICS_NAME = "metrics.json"
CONFIG_NAME = "config.json"

LOSS_TERMS = ("ce", "proxy", "nil", "supcon")

MODE_NOTES = {
    AblationMode.V1: "cross-entropy only",
    AblationMode.V2: (
        "cross-entropy + noise-invariance loss against frozen, l2-normalized per-class batch means "
        "(no learnable proxies, no instance or spatial weighting)"
    ),
    AblationMode.V3: (
        "cross-entropy + proxy loss + supervised contrastive loss over pooled features "
        "in place of the noise-invariance loss"
    ),
    AblationMode.FULL: "cross-entropy + proxy loss + noise-invariance loss",
}

PROXY_MODES = (AblationMode.FULL, AblationMode.V3)

SELF_SIMILARITY_MASK = -1e9


class RunResult(NamedTuple):
    """Artifacts of one training run."""

    out_dir: Path
    checkpoint: Path
    log: Path
    metrics: Metrics


def lr_at(epoch: int, config: TrainConfig) -> float:
    """lr0 * lr_decay ** floor(epoch / lr_step), rounded to 12 significant digits.

    The rounding drops the power's representation error, so 0.01 decays to exactly 0.001 and 0.0001.
    """
    return float(f"{config.lr0 * config.lr_decay ** (epoch // config.lr_step):.12g}")


# Losses


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRangeError(f"labels must lie in [0, {num_classes}), got {labels.min()}..{labels.max()}")


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
        labels = labels.reshape(1)
    if logits.shape[0] != labels.size:
        raise ShapeMismatchError(f"{logits.shape[0]} rows of logits for {labels.size} labels")
    _check_labels(labels, logits.shape[1])
    picked = ad.select(ad.log_softmax(logits, axis=1), (np.arange(labels.size), labels))
    return ad.scale(ad.mean(picked), -1.0)


def supcon_loss(features: Tensor, labels, temperature: float = 0.5) -> Tensor:
    """Supervised contrastive loss over l2-normalized features.

    Every sample with at least one same-class partner is an anchor; its loss is the mean
    negative log-probability of its positives under a softmax over all other samples.
    Zero features are left out.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    labels = np.asarray(labels, dtype=np.int64)
    rows = usable_rows(features.data)
    if len(rows) < 2:
        return Tensor(0.0)
    if len(rows) < features.shape[0]:
        features = ad.take_rows(features, rows)
    labels = labels[rows]
    size = len(rows)

    normalized = ad.l2n(features)
    logits = ad.scale(ad.matmul(normalized, ad.transpose(normalized)), 1.0 / temperature)
    log_prob = ad.log_softmax(ad.add(logits, np.eye(size) * SELF_SIMILARITY_MASK), axis=1)

    positives = (labels[:, None] == labels[None, :]) & ~np.eye(size, dtype=bool)
    counts = positives.sum(axis=1)
    anchors = np.flatnonzero(counts > 0)
    if len(anchors) == 0:
        return Tensor(0.0)
    per_anchor = ad.sum(ad.mul(log_prob, positives / np.maximum(counts, 1)[:, None]), axis=1)
    return ad.scale(ad.mean(ad.take_rows(per_anchor, anchors)), -1.0)


def total_loss(
    batch: BatchGroup, net: Network, bank: Optional[ProxyBank], config: TrainConfig, step: Optional[int] = None
) -> tuple[Tensor, dict[str, float]]:
    """Loss of the configured mode and the value of each of its terms.

    Terms a mode does not use are reported as 0. The proxy term refreshes the bank's
    similarity cache.
    """
    if batch.logits is None:
        raise ShapeMismatchError("the batch carries no logits")
    terms = {name: Tensor(0.0) for name in LOSS_TERMS}
    terms["ce"] = ce_loss(batch.logits, batch.labels)
    if config.mode == AblationMode.V2:
        prototypes = ProxyBank.from_prototypes(batch.pooled, batch.labels, net.num_classes)
        terms["nil"] = nil_loss(batch, prototypes, config.k_n)
    elif config.mode in PROXY_MODES:
        if bank is None:
            raise UninitializedError("proxies have not been initialized")
        terms["proxy"] = proxy_loss(bank, batch, step)
        if config.mode == AblationMode.FULL:
            terms["nil"] = nil_loss(batch, bank, config.k_n)
        else:
            terms["supcon"] = supcon_loss(batch.pooled, batch.labels, config.supcon_temperature)

    total = terms["ce"]
    for name in LOSS_TERMS[1:]:
        total = ad.add(total, terms[name])
    breakdown = {name: term.item() for name, term in terms.items()}
    breakdown["total"] = total.item()
    return total, breakdown


# Metrics


def confusion_matrix(labels, predicted, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    _check_labels(labels, num_classes)
    _check_labels(predicted, num_classes)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predicted), 1)
    return confusion


def _ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    return np.divide(numerator, denominator, out=np.zeros(len(numerator)), where=denominator > 0)


def feature_separation(features: np.ndarray, labels) -> Optional[FeatureSeparation]:
    """Mean cosine of features to their class mean, and between distinct class means."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    keep = usable_rows(features)
    if len(keep) == 0:
        return None
    unit = features[keep] / np.linalg.norm(features[keep], axis=1, keepdims=True)
    labels = labels[keep]
    centres, intra = [], []
    for label in np.unique(labels):
        centre = unit[labels == label].mean(axis=0)
        norm = np.linalg.norm(centre)
        if norm <= EPSILON_NORM:
            continue
        centre = centre / norm
        centres.append(centre)
        intra.extend(unit[labels == label] @ centre)
    if not centres:
        return None
    centres = np.stack(centres)
    pairs = centres @ centres.T
    upper = pairs[np.triu_indices(len(centres), k=1)]
    return FeatureSeparation(
        intra_class_cosine=float(np.mean(intra)),
        inter_class_cosine=float(upper.mean()) if upper.size else 0.0,
    )


def compute_metrics(labels, predicted, num_classes: int, features: Optional[np.ndarray] = None) -> Metrics:
    """Accuracy and per-class / macro recall, precision and F1 from the confusion matrix.

    A class with no support (or no predictions) gets recall (precision) 0, and F1 0 when
    precision + recall is 0.
    """
    confusion = confusion_matrix(labels, predicted, num_classes)
    hits = np.diag(confusion).astype(np.float64)
    total = confusion.sum()
    recall = _ratio(hits, confusion.sum(axis=1).astype(np.float64))
    precision = _ratio(hits, confusion.sum(axis=0).astype(np.float64))
    f1 = _ratio(2 * precision * recall, precision + recall)
    return Metrics(
        accuracy=float(hits.sum() / total) if total else 0.0,
        recall=recall.tolist(),
        precision=precision.tolist(),
        f1=f1.tolist(),
        macro_recall=float(recall.mean()),
        macro_precision=float(precision.mean()),
        macro_f1=float(f1.mean()),
        per_class_accuracy=recall.tolist(),
        confusion=confusion.tolist(),
        feature_separation=feature_separation(features, labels) if features is not None else None,
    )


def evaluate_network(net: Network, images: np.ndarray, labels) -> Metrics:
    predicted, _, pooled = predict_batch(net, images)
    return compute_metrics(labels, predicted, net.num_classes, pooled)


def evaluate(checkpoint, data_dir, split: Split = Split.TEST) -> Metrics:
    """Metrics of a saved network on one split of a dataset."""
    net, _ = load_checkpoint(checkpoint)
    images, labels, _ = load_split(data_dir, Split(split))
    if images.shape[-1] != net.side:
        raise ShapeMismatchError(f"checkpoint expects {net.side}px chips, dataset has {images.shape[-1]}px")
    return evaluate_network(net, images, labels)


# Training


def _sgd_step(parameters: list[tuple[str, Tensor]], lr: float) -> None:
    for _, parameter in parameters:
        if parameter.grad is not None:
            parameter.data = parameter.data - lr * parameter.grad
        parameter.zero_grad()


def _write_lines(path: Path, records: list[dict]) -> None:
    with atomic_writer(path) as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def _initial_bank(config: TrainConfig, net: Network, warmup_features: dict, images, labels, rng) -> ProxyBank:
    """Proxies from the warmup class means; without warmup, from one pass of the untrained network."""
    if not warmup_features:
        _, _, pooled = predict_batch(net, images)
        warmup_features = {label: pooled[labels == label] for label in range(net.num_classes)}
    else:
        warmup_features = {label: np.concatenate(chunks) for label, chunks in warmup_features.items()}
        for label in range(net.num_classes):
            warmup_features.setdefault(label, np.zeros((0, net.c_feat)))
    logger.info("initializing %d proxies from warmup features", net.num_classes)
    return init_proxies(warmup_features, config.rho, config.epsilon, config.alpha, rng)


def train_run(config: TrainConfig, data_dir, out_dir) -> RunResult:
    """Train one network and write its checkpoint, epoch log, test metrics and config echo.

    Epochs before ``warmup_epochs`` optimize cross-entropy alone while pooled features of
    every class are collected; proxies are built from them when warmup ends.
    """
    out_dir = Path(out_dir)
    manifest = load_manifest(data_dir)
    images, labels, sample_ids = load_split(data_dir, Split.TRAIN, manifest)
    test_images, test_labels, _ = load_split(data_dir, Split.TEST, manifest)
    spec = manifest.spec

    net = Network(spec.side, spec.num_classes, config.hidden_channels, config.c_feat, seed=config.seed)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    proxy_rng = np.random.default_rng([config.seed, 2])
    bank: Optional[ProxyBank] = None
    warmup_features: dict[int, list] = defaultdict(list)
    log_path = out_dir / LOG_NAME
    records = []
    step = 0

    logger.info(
        "training %s for %d epochs on %d chips (%d classes, %d shots)",
        config.mode, config.epochs, len(labels), spec.num_classes, spec.shots_per_class,
    )
    for epoch in range(config.epochs):
        warming_up = epoch < config.warmup_epochs
        if not warming_up and bank is None and config.mode in PROXY_MODES:
            bank = _initial_bank(config, net, warmup_features, images, labels, proxy_rng)
        lr = lr_at(epoch, config)
        order = shuffle_rng.permutation(len(labels))
        sums = dict.fromkeys((*LOSS_TERMS, "total"), 0.0)
        batches = 0
        for start in range(0, len(order), config.batch_size):
            rows = order[start : start + config.batch_size]
            with ad.Tape():
                result = net.forward(images[rows])
                if warming_up:
                    loss = ce_loss(result.logits, labels[rows])
                    breakdown = {"ce": loss.item(), "total": loss.item()}
                    for label in np.unique(labels[rows]):
                        warmup_features[int(label)].append(result.pooled.data[labels[rows] == label])
                else:
                    batch = BatchGroup.from_forward(net, result, labels[rows], sample_ids[rows])
                    loss, breakdown = total_loss(batch, net, bank, config, step)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}: {breakdown}")
                ad.backward(loss)
            parameters = net.parameters() + (bank.parameters() if bank is not None else [])
            _sgd_step(parameters, lr)
            if bank is not None and bank.parameters():
                bank.reseed_degenerate(proxy_rng)
            for name, value in breakdown.items():
                sums[name] += value
            batches += 1
            step += 1

        test_metrics = evaluate_network(net, test_images, test_labels)
        record = {
            "epoch": epoch,
            "lr": lr,
            "loss": {name: value / batches for name, value in sums.items()},
            "test_accuracy": test_metrics.accuracy,
        }
        records.append(record)
        _write_lines(log_path, records)
        logger.info(
            "epoch %d lr %.6g loss %.6f test accuracy %.4f", epoch, lr, record["loss"]["total"], test_metrics.accuracy
        )

    checkpoint = out_dir / CHECKPOINT_NAME
    save_checkpoint(net, checkpoint, config)
    with atomic_writer(out_dir / METRICS_NAME) as handle:
        handle.write(test_metrics.model_dump_json(indent=2))
    with atomic_writer(out_dir / CONFIG_NAME) as handle:
        echo = {
            "config": config.model_dump(mode="json"),
            "mode_notes": MODE_NOTES[config.mode],
            "data": spec.model_dump(),
        }
        handle.write(json.dumps(echo, indent=2, sort_keys=True))
    return RunResult(out_dir=out_dir, checkpoint=checkpoint, log=log_path, metrics=test_metrics)
