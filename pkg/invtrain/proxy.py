"""Inner-class invariant proxies with instance and spatial weighting.

Each class i owns a learnable proxy P_i. Features are pulled toward their
class proxy by the cosine loss L_p, where every sample is scaled by an
instance weight (a gate on how fast its similarity is changing) and its
feature map is first reweighted by the class activation mask when the
network already classifies it correctly.
"""

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from invtrain import autodiff as ad
from invtrain.autodiff import EPSILON_NORM, Tensor
from invtrain.exceptions import EmptyClassError, ShapeMismatchError, UninitializedError
from invtrain.models import ForwardResult, Network, cam_masks

logger = logging.getLogger(__name__)

GATE_GUARD = 1e-8


@dataclass
class BatchGroup:
    """Features of one batch together with the bookkeeping the losses need."""

    sample_ids: np.ndarray
    labels: np.ndarray
    predicted: np.ndarray
    feature_maps: Tensor
    pooled: Tensor
    masks: np.ndarray
    logits: Optional[Tensor] = None

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.predicted = np.asarray(self.predicted, dtype=np.int64)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        size = len(self.sample_ids)
        if not (len(self.labels) == len(self.predicted) == self.pooled.shape[0] == self.feature_maps.shape[0] == size):
            raise ShapeMismatchError("every batch field needs one entry per sample")
        if self.masks.shape != (size, *self.feature_maps.shape[-2:]):
            raise ShapeMismatchError(f"masks of shape {self.masks.shape} do not fit maps {self.feature_maps.shape}")

    @classmethod
    def from_forward(cls, net: Network, result: ForwardResult, labels, sample_ids) -> "BatchGroup":
        """Attach predictions and class activation masks to a batch forward pass."""
        predicted = np.argmax(result.logits.data, axis=1)
        masks = cam_masks(net, result.feature_map.data, result.logits.data)
        return cls(sample_ids, labels, predicted, result.feature_map, result.pooled, masks, result.logits)

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.labels

    def class_groups(self) -> dict[int, np.ndarray]:
        """Row indices per true label; every sample sits in exactly one group."""
        return {int(label): np.flatnonzero(self.labels == label) for label in np.unique(self.labels)}


class ProxyBank:
    """The C class proxies plus the per-sample similarity from the previous step."""

    def __init__(self, rho: float = 2.0, epsilon: float = 0.05, alpha: float = 1.0):
        self.rho = rho
        self.epsilon = epsilon
        self.alpha = alpha
        self.proxies: Optional[Tensor] = None
        self.distance_cache: dict[int, float] = {}
        self.step: Optional[int] = None

    @classmethod
    def from_prototypes(cls, pooled: Tensor, labels, num_classes: int) -> "ProxyBank":
        """Frozen bank of normalized per-class means of this batch (rows of absent classes stay zero)."""
        bank = cls()
        labels = np.asarray(labels)
        prototypes = np.zeros((num_classes, pooled.shape[1]))
        for label in np.unique(labels):
            centre = pooled.data[labels == label].mean(axis=0)
            norm = np.linalg.norm(centre)
            if norm > EPSILON_NORM:
                prototypes[label] = centre / norm
        bank.proxies = Tensor(prototypes, requires_grad=False)
        return bank

    @property
    def initialized(self) -> bool:
        return self.proxies is not None

    @property
    def num_classes(self) -> int:
        self.require_initialized()
        return self.proxies.shape[0]

    def require_initialized(self) -> None:
        if self.proxies is None:
            raise UninitializedError("proxies have not been initialized")

    def parameters(self) -> list[tuple[str, Tensor]]:
        if self.proxies is None or not self.proxies.requires_grad:
            return []
        return [("proxies", self.proxies)]

    def reseed_degenerate(self, rng: np.random.Generator) -> None:
        """Replace proxies whose norm collapsed to epsilon_norm or below with random unit vectors."""
        self.require_initialized()
        norms = np.linalg.norm(self.proxies.data, axis=1)
        for label in np.flatnonzero(norms <= EPSILON_NORM):
            logger.warning("proxy of class %d collapsed; re-seeding it with a random unit vector", label)
            self.proxies.data[label] = _random_unit(rng, self.proxies.shape[1])


def _random_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    vector = rng.normal(size=dim)
    return vector / np.linalg.norm(vector)


def init_proxies(
    warmup_features: Union[Mapping[int, Sequence], Sequence[Sequence]],
    rho: float = 2.0,
    epsilon: float = 0.05,
    alpha: float = 1.0,
    rng: Optional[np.random.Generator] = None,
) -> ProxyBank:
    """P_i = l2n(mean of class-i warmup features), learnable from here on.

    A class mean with norm <= epsilon_norm falls back to a random unit vector.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    classes = sorted(warmup_features) if isinstance(warmup_features, Mapping) else range(len(warmup_features))
    rows = []
    for label in classes:
        features = np.asarray(warmup_features[label], dtype=np.float64)
        if features.size == 0:
            raise EmptyClassError(f"class {label} has no warmup features")
        centre = features.reshape(-1, features.shape[-1]).mean(axis=0)
        norm = np.linalg.norm(centre)
        if norm <= EPSILON_NORM:
            logger.warning("warmup mean of class %d is ~0 (EmptyMean); using a random unit vector", label)
            rows.append(_random_unit(rng, centre.size))
        else:
            rows.append(centre / norm)
    bank = ProxyBank(rho=rho, epsilon=epsilon, alpha=alpha)
    bank.proxies = Tensor(np.stack(rows), requires_grad=True)
    return bank


def instance_weight(d_t: float, d_prev: Optional[float], rho: float, epsilon: float) -> float:
    """lambda = clamp(1 - beta * (d_t + 2) / 2, 0, 1) ** rho.

    beta is 1 when the relative change (d_t - d_prev) / d_t reaches epsilon, 0 without
    history or when |d_t| < 1e-8.
    """
    beta = 0.0
    if d_prev is not None and abs(d_t) >= GATE_GUARD and (d_t - d_prev) / d_t >= epsilon:
        beta = 1.0
    base = 1.0 - beta * (d_t + 2.0) / 2.0
    return float(np.clip(base, 0.0, 1.0) ** rho)


def spatial_reweight(f_map: Tensor, mask, correct, alpha_val: float) -> Tensor:
    """(1 + alpha (M - 1)) * f, with alpha = alpha_val for correct predictions and 0 otherwise.

    Works on one [C, h, w] map with an [h, w] mask and a bool, or on a batch with
    [B, h, w] masks and a boolean vector.
    """
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if mask.shape[-2:] != f_map.shape[-2:]:
        raise ShapeMismatchError(f"mask {mask.shape} does not fit feature map {f_map.shape}")
    alpha = np.where(np.asarray(correct, dtype=bool), alpha_val, 0.0)
    if f_map.ndim == 4:
        if mask.shape[0] != f_map.shape[0]:
            raise ShapeMismatchError("one mask per feature map is required")
        weight = 1.0 + alpha.reshape(-1, 1, 1) * (mask - 1.0)
        return ad.mul(f_map, weight[:, None, :, :])
    return ad.mul(f_map, 1.0 + float(alpha) * (mask - 1.0))


def usable_rows(pooled: np.ndarray) -> np.ndarray:
    """Rows whose norm allows normalization."""
    return np.flatnonzero(np.linalg.norm(pooled, axis=1) > EPSILON_NORM)


def proxy_loss(bank: ProxyBank, batch: BatchGroup, step: Optional[int] = None) -> Tensor:
    """L_p = -sum lambda * cos(l2n(GAP(f^w)), l2n(P_label)); refreshes the similarity cache.

    Samples whose reweighted pooled feature is a zero vector cannot be normalized and sit out the step.
    """
    bank.require_initialized()
    reweighted = spatial_reweight(batch.feature_maps, batch.masks, batch.correct, bank.alpha)
    pooled = ad.global_avg_pool(reweighted)
    rows = usable_rows(pooled.data)
    if len(rows) < len(batch):
        logger.debug("%d samples have zero reweighted features at step %s", len(batch) - len(rows), step)
    if len(rows) == 0:
        return Tensor(0.0)
    if len(rows) < len(batch):
        pooled = ad.take_rows(pooled, rows)
    labels = batch.labels[rows]
    similarity = ad.cosine_sim(pooled, ad.take_rows(bank.proxies, labels))

    d_t = similarity.data
    ids = batch.sample_ids[rows]
    weights = np.array(
        [instance_weight(d, bank.distance_cache.get(int(sid)), bank.rho, bank.epsilon) for d, sid in zip(d_t, ids)]
    )
    for sid, d in zip(ids, d_t):
        bank.distance_cache[int(sid)] = float(d)
    bank.step = step
    return ad.scale(ad.sum(ad.mul(similarity, weights)), -1.0)
