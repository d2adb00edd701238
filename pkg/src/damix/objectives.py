"""Identity classification loss, batch-hard triplet loss, stage composites.

The label space assigns every (domain, local identity) pair a unique
global class index by packing per-domain ranges back to back, so one
classifier head serves all domains while their classes stay disjoint.
The unlabeled domain's range is rebuilt whenever a new clustering
changes its identity count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import (
    CompositionError,
    DomainLookupError,
    SamplerContractError,
    ShapeError,
    UndefinedLossError,
)
from .numerics import Tensor

__all__ = [
    "LabelSpace",
    "LossBundle",
    "id_loss",
    "triplet_loss",
    "stage_loss",
]


class LabelSpace:
    """Disjoint global class ranges, one per domain, packed by domain id."""

    def __init__(self, counts):
        self._counts = {int(d): int(c) for d, c in dict(counts).items()}
        for d, c in self._counts.items():
            if c < 0:
                raise ShapeError(f"identity count for domain {d} must be nonnegative, got {c}")
        self._offsets = {}
        running = 0
        for d in sorted(self._counts):
            self._offsets[d] = running
            running += self._counts[d]
        self._total = running

    @property
    def total_classes(self) -> int:
        return self._total

    @property
    def domains(self) -> list:
        return sorted(self._counts)

    def count(self, domain: int) -> int:
        try:
            return self._counts[int(domain)]
        except KeyError:
            raise DomainLookupError(f"domain {domain} is not part of the label space") from None

    def offset(self, domain: int) -> int:
        self.count(domain)
        return self._offsets[int(domain)]

    def domain_range(self, domain: int) -> range:
        start = self.offset(domain)
        return range(start, start + self.count(domain))

    def global_index(self, domain: int, local: int) -> int:
        count = self.count(domain)
        if not 0 <= local < count:
            raise ShapeError(f"local identity {local} outside [0, {count}) for domain {domain}")
        return self._offsets[int(domain)] + int(local)

    def with_count(self, domain: int, new_count: int) -> "LabelSpace":
        """Fresh space with one domain's identity count replaced."""
        self.count(domain)
        counts = dict(self._counts)
        counts[int(domain)] = int(new_count)
        return LabelSpace(counts)


def id_loss(logits: Tensor, labels, ignore_mask=None) -> Tensor:
    """Mean negative log softmax probability of each unmasked label."""
    if logits.ndim != 2:
        raise ShapeError(f"expected logits of shape (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch extent {n}")
    mask = np.zeros(n, dtype=bool) if ignore_mask is None else np.asarray(ignore_mask, dtype=bool)
    keep = np.flatnonzero(~mask)
    if keep.size == 0:
        raise UndefinedLossError("every sample is masked; the mean is undefined")
    if labels[keep].min() < 0 or labels[keep].max() >= k:
        raise ShapeError(f"unmasked labels must lie in [0, {k})")

    # Shift by the detached row maximum so exponentials cannot overflow.
    row_max = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = nx.sub(logits, row_max)
    log_norm = nx.log(nx.sum(nx.exp(shifted), axis=1, keepdims=True))
    log_probs = nx.sub(shifted, log_norm)
    flat = nx.reshape(log_probs, (n * k,))
    picked = nx.take(flat, keep * k + labels[keep])
    return nx.neg(nx.mean(picked))


def _pairwise_distances(features: Tensor) -> Tensor:
    sq = nx.sum(nx.mul(features, features), axis=1, keepdims=True)
    cross = nx.matmul(features, nx.transpose(features))
    d2 = nx.add(nx.sub(sq, nx.mul(cross, 2.0)), nx.transpose(sq))
    # Clamp tiny negative rounding, keep the square root differentiable at zero.
    return nx.sqrt(nx.add(nx.leaky_relu(d2, slope=0.0), 1e-12))


def triplet_loss(features: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard hinge: each anchor against its farthest positive and nearest negative."""
    if features.ndim != 2:
        raise ShapeError(f"expected features of shape (N, C), got {features.shape}")
    n = features.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch extent {n}")

    same = labels[:, None] == labels[None, :]
    positive = same & ~np.eye(n, dtype=bool)
    negative = ~same
    if not positive.any(axis=1).all():
        lonely = int(np.flatnonzero(~positive.any(axis=1))[0])
        raise SamplerContractError(f"sample {lonely} has no positive partner in the batch")
    if not negative.any(axis=1).all():
        raise SamplerContractError("batch contains a single identity; no negatives exist")

    distances = _pairwise_distances(features)
    detached = distances.data
    hardest_pos = np.where(positive, detached, -np.inf).argmax(axis=1)
    hardest_neg = np.where(negative, detached, np.inf).argmin(axis=1)

    flat = nx.reshape(distances, (n * n,))
    rows = np.arange(n)
    d_pos = nx.take(flat, rows * n + hardest_pos)
    d_neg = nx.take(flat, rows * n + hardest_neg)
    hinge = nx.leaky_relu(nx.add(nx.sub(d_pos, d_neg), margin), slope=0.0)
    return nx.mean(hinge)


@dataclass
class LossBundle:
    """Scalar loss components of one training step; total is their exact sum."""

    stage: str
    id_loss: Tensor
    triplet_loss: Tensor
    id_mdif_loss: Optional[Tensor]
    total: Tensor

    def as_floats(self) -> dict:
        out = {"id": self.id_loss.item(), "triplet": self.triplet_loss.item(), "total": self.total.item()}
        if self.id_mdif_loss is not None:
            out["id_mdif"] = self.id_mdif_loss.item()
        return out


def stage_loss(stage: str, id=None, triplet=None, id_mdif=None) -> LossBundle:
    """Combine loss parts per training stage.

    The first stage sums the identity and triplet terms. The adaptation
    stage additionally requires the identity term computed on fused
    features; the plain identity and triplet terms stay defined on the
    pre-fusion features.
    """
    if id is None or triplet is None:
        raise CompositionError(f"{stage} stage needs both the identity and triplet terms")
    if stage == "pretrain":
        if id_mdif is not None:
            raise CompositionError("the first training stage has no fused-feature identity term")
        total = nx.add(id, triplet)
    elif stage == "adapt":
        if id_mdif is None:
            raise CompositionError("the adaptation stage requires the fused-feature identity term")
        total = nx.add(nx.add(id, id_mdif), triplet)
    else:
        raise CompositionError(f"unknown stage {stage!r}")
    return LossBundle(stage=stage, id_loss=id, triplet_loss=triplet, id_mdif_loss=id_mdif, total=total)
