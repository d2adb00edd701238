"""Retrieval metrics and feature-space diagnostics.

Retrieval follows the single-gallery protocol: every query is ranked
against the full gallery by Euclidean distance, ties broken by gallery
index, with no camera filtering and self-matches allowed. Average
precision for a query accumulates precision at every relevant rank and
divides by that query's relevant count.

The diagnostics measure how far apart domains sit (distance matrix of
per-domain mean features) and how separable identities are: the mean
pairwise distance between identity centroids, and the per-identity sum
of squared deviations averaged over identities. The deviation sum is
deliberately not divided by the per-identity sample count; pass
``normalized=True`` for the size-corrected variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, ShapeError
from .numerics import Tensor

__all__ = [
    "RetrievalResult",
    "DomainGapReport",
    "normalize_rows",
    "evaluate_retrieval",
    "domain_distance_matrix",
    "interclass_distance",
    "intraclass_variance",
    "domain_gap_report",
]


def _as_matrix(features, name: str) -> np.ndarray:
    arr = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must have shape (N, C), got {arr.shape}")
    return arr


def _euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq_a = np.sum(a * a, axis=1)[:, None]
    sq_b = np.sum(b * b, axis=1)[None, :]
    d2 = sq_a - 2.0 * (a @ b.T) + sq_b
    np.maximum(d2, 0.0, out=d2)
    return np.sqrt(d2)


def normalize_rows(features) -> np.ndarray:
    """Rows scaled to unit Euclidean length; zero rows stay at the origin."""
    arr = _as_matrix(features, "features")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    return np.divide(arr, norms, out=arr.copy(), where=norms > 0)


@dataclass
class RetrievalResult:
    """Mean average precision plus rank-k accuracies."""

    mAP: float
    cmc: dict
    average_precisions: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "cmc": {f"rank{k}": v for k, v in sorted(self.cmc.items())},
            "average_precisions": self.average_precisions.tolist(),
        }


def evaluate_retrieval(query_feats, query_ids, gallery_feats, gallery_ids, ranks=(1, 5, 10)) -> RetrievalResult:
    """Rank the gallery for every query; report AP, mAP, and CMC."""
    queries = _as_matrix(query_feats, "query features")
    gallery = _as_matrix(gallery_feats, "gallery features")
    if queries.shape[1] != gallery.shape[1]:
        raise ShapeError(f"feature widths differ: {queries.shape[1]} vs {gallery.shape[1]}")
    q_ids = np.asarray(query_ids, dtype=np.int64)
    g_ids = np.asarray(gallery_ids, dtype=np.int64)
    if q_ids.shape != (queries.shape[0],) or g_ids.shape != (gallery.shape[0],):
        raise ShapeError("identity lists must match their feature row counts")
    if gallery.shape[0] == 0:
        raise EvaluationError("gallery is empty")
    missing = set(q_ids.tolist()) - set(g_ids.tolist())
    if missing:
        raise EvaluationError(f"query identity {sorted(missing)[0]} does not appear in the gallery")

    distances = _euclidean(queries, gallery)
    positions = np.arange(1, gallery.shape[0] + 1, dtype=np.float64)
    aps = np.empty(queries.shape[0])
    first_hit = np.empty(queries.shape[0], dtype=np.int64)
    for i in range(queries.shape[0]):
        order = np.argsort(distances[i], kind="stable")  # stable: ties keep gallery order
        relevant = g_ids[order] == q_ids[i]
        hits = np.cumsum(relevant)
        aps[i] = float(np.sum((hits / positions) * relevant) / relevant.sum())
        first_hit[i] = int(np.argmax(relevant))
    cmc = {int(k): float(np.mean(first_hit < int(k))) for k in ranks}
    return RetrievalResult(mAP=float(np.mean(aps)), cmc=cmc, average_precisions=aps)


def domain_distance_matrix(features, domain_ids, domains=None) -> np.ndarray:
    """Euclidean distances between per-domain mean features.

    Rows/columns follow sorted domain order. Passing an explicit domain
    list checks that every requested domain has at least one sample.
    """
    feats = _as_matrix(features, "features")
    ids = np.asarray(domain_ids, dtype=np.int64)
    if ids.shape != (feats.shape[0],):
        raise ShapeError("domain tags must match the feature row count")
    present = sorted(set(ids.tolist()))
    wanted = sorted(int(d) for d in domains) if domains is not None else present
    empty = [d for d in wanted if d not in present]
    if empty:
        raise EvaluationError(f"domain {empty[0]} has no samples")
    means = np.stack([feats[ids == d].mean(axis=0) for d in wanted])
    return _euclidean(means, means)


def _identity_means(feats: np.ndarray, labels: np.ndarray):
    identities = sorted(set(labels.tolist()))
    return identities, np.stack([feats[labels == i].mean(axis=0) for i in identities])


def interclass_distance(features, identity_labels) -> float:
    """Mean pairwise Euclidean distance between identity centroids."""
    feats = _as_matrix(features, "features")
    labels = np.asarray(identity_labels, dtype=np.int64)
    if labels.shape != (feats.shape[0],):
        raise ShapeError("identity labels must match the feature row count")
    identities, means = _identity_means(feats, labels)
    m = len(identities)
    if m < 2:
        raise EvaluationError(f"need at least 2 identities, got {m}")
    d = _euclidean(means, means)
    iu = np.triu_indices(m, k=1)
    return float(d[iu].mean())


def intraclass_variance(features, identity_labels, normalized: bool = False) -> float:
    """Average over identities of the summed squared deviation from the centroid.

    With normalized=True each identity's sum is divided by its sample
    count before averaging.
    """
    feats = _as_matrix(features, "features")
    labels = np.asarray(identity_labels, dtype=np.int64)
    if labels.shape != (feats.shape[0],):
        raise ShapeError("identity labels must match the feature row count")
    if labels.size == 0:
        raise EvaluationError("no samples to measure")
    totals = []
    for identity in sorted(set(labels.tolist())):
        rows = feats[labels == identity]
        deviations = rows - rows.mean(axis=0)
        total = float(np.sum(deviations * deviations))
        totals.append(total / rows.shape[0] if normalized else total)
    return float(np.mean(totals))


@dataclass
class DomainGapReport:
    """Distance matrix over domain means plus per-domain separability stats."""

    domains: list
    domain_means: np.ndarray
    distance_matrix: np.ndarray
    interclass: dict = field(default_factory=dict)
    intraclass: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "domains": self.domains,
            "distance_matrix": self.distance_matrix.tolist(),
            "interclass": {str(k): v for k, v in self.interclass.items()},
            "intraclass": {str(k): v for k, v in self.intraclass.items()},
        }


def domain_gap_report(features, domain_ids, identity_labels, normalized: bool = False) -> DomainGapReport:
    """Bundle the distance matrix with per-domain and combined identity stats.

    A domain whose sample set cannot support a statistic (fewer than two
    identities) reports None for it rather than failing the run.
    """
    feats = _as_matrix(features, "features")
    ids = np.asarray(domain_ids, dtype=np.int64)
    labels = np.asarray(identity_labels, dtype=np.int64)
    domains = sorted(set(ids.tolist()))
    means = np.stack([feats[ids == d].mean(axis=0) for d in domains])
    inter, intra = {}, {}
    for d in domains:
        rows = ids == d
        try:
            inter[d] = interclass_distance(feats[rows], labels[rows])
        except EvaluationError:
            inter[d] = None
        intra[d] = intraclass_variance(feats[rows], labels[rows], normalized=normalized)
    try:
        inter["combined"] = interclass_distance(feats, labels)
    except EvaluationError:
        inter["combined"] = None
    intra["combined"] = intraclass_variance(feats, labels, normalized=normalized)
    return DomainGapReport(
        domains=domains,
        domain_means=means,
        distance_matrix=_euclidean(means, means),
        interclass=inter,
        intraclass=intra,
    )
