"""Cluster-validity scores: unsupervised (CH, DB) and supervised (F1, NMI, ARI).

Variant choices are recorded in every report so scores stay auditable:
NMI normalizes by the arithmetic mean of the two entropies, DB uses the mean
member-to-centroid distance as the cluster spread, and F1 matches clusters
to truth classes one-to-one by maximum total overlap before macro-averaging
over truth classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import MetricUndefinedError


@dataclass
class ContingencyTable:
    counts: np.ndarray  # (clusters, classes)
    row_values: np.ndarray
    col_values: np.ndarray

    @property
    def row_marginals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def col_marginals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    space: str
    k: int
    ch: float | None = None
    db: float | None = None
    f1: float | None = None
    nmi: float | None = None
    ari: float | None = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "space": self.space,
            "k": self.k,
            "ch": self.ch,
            "db": self.db,
            "f1": self.f1,
            "nmi": self.nmi,
            "ari": self.ari,
            "notes": self.notes,
        }


def contingency(labels_a, labels_b) -> ContingencyTable:
    labels_a = np.asarray(labels_a).ravel()
    labels_b = np.asarray(labels_b).ravel()
    if labels_a.size != labels_b.size:
        raise ValueError(f"label arrays differ in length: {labels_a.size} vs {labels_b.size}")
    if labels_a.size == 0:
        raise ValueError("label arrays are empty")
    va, ia = np.unique(labels_a, return_inverse=True)
    vb, ib = np.unique(labels_b, return_inverse=True)
    counts = np.zeros((va.size, vb.size), dtype=np.int64)
    np.add.at(counts, (ia, ib), 1)
    return ContingencyTable(counts=counts, row_values=va, col_values=vb)


def _split_by_label(points: np.ndarray, labels: np.ndarray):
    values = np.unique(labels)
    return [(v, points[labels == v]) for v in values]


def calinski_harabasz(points: np.ndarray, labels) -> float:
    """Between-over-within scatter ratio scaled by (n - k)/(k - 1); higher is better."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    labels = np.asarray(labels).ravel()
    if labels.size != points.shape[0]:
        raise ValueError("one label per point required")
    groups = _split_by_label(points, labels)
    k = len(groups)
    n = points.shape[0]
    if k < 2:
        raise MetricUndefinedError("Calinski-Harabasz needs at least 2 clusters")
    if n <= k:
        raise MetricUndefinedError("Calinski-Harabasz needs more points than clusters")
    center = points.mean(axis=0)
    tr_w = 0.0
    tr_b = 0.0
    for _, members in groups:
        c = members.mean(axis=0)
        tr_w += float(((members - c) ** 2).sum())
        tr_b += members.shape[0] * float(((c - center) ** 2).sum())
    if tr_w == 0.0:
        return float("inf")
    return (tr_b / tr_w) * (n - k) / (k - 1)


def davies_bouldin(points: np.ndarray, labels) -> float:
    """Mean over clusters of the worst (s_i + s_j) / d_ij ratio; lower is better.

    s_i is the mean member-to-centroid distance; coincident centroids of
    distinct clusters yield an infinite score.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    labels = np.asarray(labels).ravel()
    if labels.size != points.shape[0]:
        raise ValueError("one label per point required")
    groups = _split_by_label(points, labels)
    k = len(groups)
    if k < 2:
        raise MetricUndefinedError("Davies-Bouldin needs at least 2 clusters")
    centroids = np.stack([members.mean(axis=0) for _, members in groups])
    spreads = np.array([
        float(np.linalg.norm(members - centroids[i], axis=1).mean())
        for i, (_, members) in enumerate(groups)
    ])
    worst = np.zeros(k)
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            dij = float(np.linalg.norm(centroids[i] - centroids[j]))
            r = np.inf if dij == 0.0 else (spreads[i] + spreads[j]) / dij
            worst[i] = max(worst[i], r)
    return float(worst.mean())


def _entropy(marginals: np.ndarray, n: int) -> float:
    pr = marginals[marginals > 0] / n
    return float(-(pr * np.log(pr)).sum())


def nmi(labels_a, labels_b) -> float:
    """Mutual information normalized by the arithmetic mean of the entropies.

    Degenerate partitions: both single-cluster -> 1, exactly one -> 0.
    """
    table = contingency(labels_a, labels_b)
    single_a = table.row_values.size == 1
    single_b = table.col_values.size == 1
    if single_a and single_b:
        return 1.0
    if single_a or single_b:
        return 0.0
    n = table.n
    mi = 0.0
    a = table.row_marginals
    b = table.col_marginals
    for i, j in zip(*np.nonzero(table.counts)):
        nij = table.counts[i, j]
        mi += (nij / n) * np.log(n * nij / (a[i] * b[j]))
    mi = max(mi, 0.0)
    denom = 0.5 * (_entropy(a, n) + _entropy(b, n))
    if denom == 0.0:
        return 0.0
    return float(min(mi / denom, 1.0))


def ari(labels_a, labels_b) -> float:
    """Pair-counting Rand index adjusted for chance; 1 iff partitions identical."""
    table = contingency(labels_a, labels_b)
    n = table.n

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = float(comb2(table.counts.astype(np.float64)).sum())
    sum_a = float(comb2(table.row_marginals.astype(np.float64)).sum())
    sum_b = float(comb2(table.col_marginals.astype(np.float64)).sum())
    total = comb2(float(n))
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    denom = max_index - expected
    if denom == 0.0:
        # both partitions trivial (all-one-cluster or all-singletons)
        return 1.0
    return float((sum_ij - expected) / denom)


def f1_matched(pred, truth) -> float:
    """Macro F1 over truth classes after optimal one-to-one cluster matching.

    Clusters and classes are matched to maximize total overlap (bipartite
    assignment); unmatched truth classes score 0, surplus clusters are
    ignored.
    """
    table = contingency(pred, truth)
    counts = table.counts
    rows, cols = linear_sum_assignment(counts, maximize=True)
    match = {int(c): int(r) for r, c in zip(rows, cols)}
    cluster_sizes = table.row_marginals
    class_sizes = table.col_marginals
    scores = []
    for j in range(counts.shape[1]):
        if j not in match or counts[match[j], j] == 0:
            scores.append(0.0)
            continue
        i = match[j]
        overlap = counts[i, j]
        precision = overlap / cluster_sizes[i]
        recall = overlap / class_sizes[j]
        scores.append(2.0 * precision * recall / (precision + recall))
    return float(np.mean(scores))


METRIC_VARIANTS = {
    "nmi_normalization": "arithmetic mean of entropies",
    "db_spread": "mean member-to-centroid distance",
    "f1_matching": "optimal one-to-one overlap matching, macro over truth classes",
}


def evaluate(points: np.ndarray, labels, truth=None, k: int | None = None,
             space: str = "embedding") -> MetricsReport:
    """Score a clustering on the given point space.

    Masked points (label < 0) are excluded throughout; supervised scores are
    computed only against truth ids > 0 (0 means unlabeled) and only when
    truth is supplied.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    labels = np.asarray(labels).ravel()
    if labels.size != points.shape[0]:
        raise ValueError("one label per point required")
    kept = labels >= 0
    points = points[kept]
    labels = labels[kept]
    if labels.size == 0:
        raise ValueError("no unmasked points to evaluate")
    report = MetricsReport(
        space=space,
        k=int(np.unique(labels).size) if k is None else int(k),
        notes=dict(METRIC_VARIANTS),
    )
    report.ch = calinski_harabasz(points, labels)
    report.db = davies_bouldin(points, labels)
    if truth is not None:
        truth = np.asarray(truth).ravel()
        if truth.size != kept.size:
            raise ValueError("truth length must match the unfiltered label array")
        truth = truth[kept]
        labelled = truth > 0
        if not labelled.any():
            raise ValueError("truth raster has no labelled pixels")
        report.f1 = f1_matched(labels[labelled], truth[labelled])
        report.nmi = nmi(labels[labelled], truth[labelled])
        report.ari = ari(labels[labelled], truth[labelled])
    return report
