"""Noise-invariance loss.

Every class present in a batch takes a turn as the anchor. The other samples
are scored by how their residual from their own proxy projects onto the
anchor's proxy (the virtual noise measurement), sorted, and cut into K_n noise
environments. Per environment the anchor samples are contrasted against the
environment (a softmax with the anchor's own score as the positive), and an
IRM-style penalty on a dummy scale w (at w = 1) asks that the optimum not
depend on the environment.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from invtrain import autodiff as ad
from invtrain.autodiff import Tensor
from invtrain.exceptions import (
    EmptyAnchorError,
    EmptyEnvironmentError,
    EmptyInputError,
    ShapeMismatchError,
)
from invtrain.proxy import BatchGroup, ProxyBank, usable_rows

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvironmentPartition:
    """Non-anchor samples cut into noise environments by descending score."""

    anchor: Optional[int]
    scores: tuple[tuple[int, float], ...]
    environments: tuple[tuple[int, ...], ...]

    @property
    def k_n(self) -> int:
        return len(self.environments)

    @property
    def sizes(self) -> list[int]:
        return [len(env) for env in self.environments]

    def environment_scores(self) -> list[list[float]]:
        lookup = dict(self.scores)
        return [[lookup[sid] for sid in env] for env in self.environments]

    def validate(self) -> None:
        """Disjoint, covering, non-increasing and balanced to within one sample."""
        flat = [sid for env in self.environments for sid in env]
        if len(flat) != len(set(flat)) or sorted(flat) != sorted(sid for sid, _ in self.scores):
            raise AssertionError("environments must partition the scored samples")
        ordered = [score for env in self.environment_scores() for score in env]
        if any(b > a for a, b in zip(ordered, ordered[1:])):
            raise AssertionError("scores must be non-increasing across environments")
        if self.sizes and max(self.sizes) - min(self.sizes) > 1:
            raise AssertionError("environment sizes may differ by at most one")


def virtual_noise_measure(f: Tensor, p_own: Tensor, p_anchor: Tensor) -> Tensor:
    """d_v = sum((l2n(f) - l2n(P_own)) * P_anchor)."""
    if not f.shape == p_own.shape == p_anchor.shape:
        raise ShapeMismatchError("feature and proxies must share a shape")
    return ad.sum(ad.mul(ad.sub(ad.l2n(f), ad.l2n(p_own)), p_anchor), axis=-1)


def score_matrix(bank: ProxyBank, pooled: Tensor, labels) -> Tensor:
    """S[b, i] = d_v(f_b, P_{label_b}, P_i) for every row b and every class i."""
    bank.require_initialized()
    residual = ad.sub(ad.l2n(pooled), ad.l2n(ad.take_rows(bank.proxies, labels)))
    return ad.matmul(residual, ad.transpose(bank.proxies))


def build_environments(scores: Sequence[tuple[int, float]], k_n: int, anchor: Optional[int] = None):
    """Stable descending sort (ties by sample id) cut into k_n contiguous environments.

    The first ``len % k_n`` environments take one extra sample; with fewer samples than
    k_n the empty environments are dropped.
    """
    if k_n < 1:
        raise ValueError("k_n must be >= 1")
    if not scores:
        raise EmptyInputError("no scores to partition")
    ordered = tuple(sorted(((int(sid), float(s)) for sid, s in scores), key=lambda item: (-item[1], item[0])))
    effective = min(k_n, len(ordered))
    if effective < k_n:
        logger.info("anchor %s: %d samples for %d environments; using %d", anchor, len(ordered), k_n, effective)
    size, extra = divmod(len(ordered), effective)
    environments, start = [], 0
    for index in range(effective):
        stop = start + size + (1 if index < extra else 0)
        environments.append(tuple(sid for sid, _ in ordered[start:stop]))
        start = stop
    return EnvironmentPartition(anchor=anchor, scores=ordered, environments=tuple(environments))


def _as_vector(scores) -> Tensor:
    scores = ad.as_tensor(scores)
    return ad.reshape(scores, (1,)) if scores.ndim == 0 else scores


def _score_rows(pos_scores: Tensor, neg_scores: Tensor) -> Tensor:
    """Rows [s_k, negatives...], one per anchor sample."""
    pos, neg = _as_vector(pos_scores), _as_vector(neg_scores)
    if neg.shape[0] == 0:
        raise EmptyEnvironmentError("the environment holds no negatives")
    if pos.shape[0] == 0:
        raise EmptyAnchorError("the anchor class holds no samples")
    n, m = pos.shape[0], neg.shape[0]
    return ad.concat([ad.reshape(pos, (n, 1)), ad.broadcast_to(ad.reshape(neg, (1, m)), (n, m))], axis=1)


def relative_distribution_loss(pos_scores, neg_scores) -> Tensor:
    """Ld = -sum_k log(exp(s_k) / (exp(s_k) + sum_j exp(q_j))), via a stabilized log-softmax."""
    rows = _score_rows(pos_scores, neg_scores)
    return ad.scale(ad.sum(ad.select(ad.log_softmax(rows, axis=1), (slice(None), 0))), -1.0)


def irm_penalty(pos_scores, neg_scores) -> Tensor:
    """sum_k (s_bar_k - s_k)^2 with s_bar_k = sum softmax(row_k) * row_k.

    Each term is (d/dw of the per-sample Ld with every score scaled by w)^2 at w = 1.
    """
    rows = _score_rows(pos_scores, neg_scores)
    expected = ad.sum(ad.mul(ad.softmax(rows, axis=1), rows), axis=1)
    gap = ad.sub(expected, _as_vector(pos_scores))
    return ad.sum(ad.mul(gap, gap))


def env_loss(anchor: int, anchor_features: Tensor, env_features: Tensor, env_labels, bank: ProxyBank) -> Tensor:
    """Ld of one anchor class against one noise environment, from features."""
    bank.require_initialized()
    if anchor_features.shape[0] == 0:
        raise EmptyAnchorError(f"anchor class {anchor} has no features")
    if env_features.shape[0] == 0:
        raise EmptyEnvironmentError(f"anchor class {anchor}: empty environment")
    own_labels = np.full(anchor_features.shape[0], anchor)
    anchor_scores = ad.select(score_matrix(bank, anchor_features, own_labels), (slice(None), anchor))
    env_scores = ad.select(score_matrix(bank, env_features, np.asarray(env_labels)), (slice(None), anchor))
    return relative_distribution_loss(anchor_scores, env_scores)


def nil_loss(batch: BatchGroup, bank: ProxyBank, k_n: int) -> Tensor:
    """L_ninv = sum over anchors and their environments of Ld + penalty."""
    bank.require_initialized()
    rows = usable_rows(batch.pooled.data)
    if len(rows) < len(batch):
        logger.debug("%d samples with zero pooled features sit out the noise-invariance loss", len(batch) - len(rows))
    if len(rows) == 0:
        return Tensor(0.0)
    pooled = batch.pooled if len(rows) == len(batch) else ad.take_rows(batch.pooled, rows)
    labels = batch.labels[rows]
    ids = batch.sample_ids[rows]
    scores = score_matrix(bank, pooled, labels)
    position = {int(sid): i for i, sid in enumerate(ids)}

    terms = []
    for anchor in np.unique(labels):
        anchor = int(anchor)
        positives = np.flatnonzero(labels == anchor)
        negatives = np.flatnonzero(labels != anchor)
        if len(negatives) == 0:
            logger.info("anchor class %d has no negatives in this batch", anchor)
            continue
        partition = build_environments(
            list(zip(ids[negatives], scores.data[negatives, anchor])), k_n, anchor=anchor
        )
        pos = ad.select(scores, (positives, anchor))
        for environment in partition.environments:
            members = np.array([position[sid] for sid in environment], dtype=np.intp)
            neg = ad.select(scores, (members, anchor))
            terms.append(ad.add(relative_distribution_loss(pos, neg), irm_penalty(pos, neg)))
    if not terms:
        return Tensor(0.0)
    return ad.sum(ad.concat([ad.reshape(term, (1,)) for term in terms]))
