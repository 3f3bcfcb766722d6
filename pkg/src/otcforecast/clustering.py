"""Activity features per dealer and their partition into four ordered tiers.

Features are computed strictly from the training interval (days before the
split boundary).  Clustering is k-means with k-means++ seeding on
z-normalized features, deterministic under a seed, with explicit repair of
empty clusters.  Labels are then permuted so that label 0 is the least
active tier and label k-1 the most active.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError
from .market import DealerHistory
from .seeding import rng_for

FEATURE_NAMES = (
    "total_trades",
    "distinct_bonds",
    "active_day_fraction",
    "buy_ratio",
    "mean_trades_per_active_day",
)


@dataclass(frozen=True)
class DealerFeatures:
    dealer_id: str
    total_trades: int
    distinct_bonds: int
    active_day_fraction: float
    buy_ratio: float
    mean_trades_per_active_day: float
    inactive: bool = False  # no trades at all inside the training interval

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                self.total_trades,
                self.distinct_bonds,
                self.active_day_fraction,
                self.buy_ratio,
                self.mean_trades_per_active_day,
            ],
            dtype=np.float64,
        )


@dataclass
class ClusterAssignment:
    labels: dict[str, int]
    centroids: np.ndarray  # k x n_features, in z-normalized space
    k: int
    empty_labels: tuple[int, ...] = ()
    degenerate: bool = False
    wcss_history: tuple[float, ...] = ()


def compute_dealer_features(
    histories: list[DealerHistory], boundary: int
) -> dict[str, DealerFeatures]:
    """Per-dealer activity features over day indices [0, boundary)."""
    if boundary < 0:
        raise ContractError(f"boundary {boundary} must be nonnegative")
    out: dict[str, DealerFeatures] = {}
    for h in histories:
        if boundary > h.day_vectors.shape[0]:
            raise ContractError(
                f"boundary {boundary} exceeds calendar of {h.day_vectors.shape[0]} days"
            )
        window = h.day_vectors[:boundary]
        v = window.shape[1] // 2
        total = int(window.sum())
        if total == 0:
            out[h.dealer_id] = DealerFeatures(h.dealer_id, 0, 0, 0.0, 0.0, 0.0, inactive=True)
            continue
        buys = int(window[:, :v].sum())
        bond_hit = window[:, :v] | window[:, v:]
        distinct = int((bond_hit.any(axis=0)).sum())
        active_days = int((window.any(axis=1)).sum())
        out[h.dealer_id] = DealerFeatures(
            dealer_id=h.dealer_id,
            total_trades=total,
            distinct_bonds=distinct,
            active_day_fraction=active_days / boundary,
            buy_ratio=buys / total,
            mean_trades_per_active_day=total / active_days,
        )
    return out


def _z_normalize(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    z = np.zeros_like(x)
    nonconstant = std > 0
    z[:, nonconstant] = (x[:, nonconstant] - mean[nonconstant]) / std[nonconstant]
    return z


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[int(rng.integers(n))]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = int(rng.choice(n, p=d2 / total))
        else:
            pick = int(rng.integers(n))
        centroids[j] = x[pick]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_cluster(
    features: dict[str, DealerFeatures],
    k: int = 4,
    seed: int = 0,
    max_iter: int = 100,
) -> ClusterAssignment:
    """Lloyd iterations from a k-means++ seeding, deterministic under seed.

    Empty clusters are repaired by moving the farthest point of the largest
    cluster; if even that is futile (zero spread) the assignment is flagged
    degenerate.  Fewer dealers than k degrades to one singleton cluster per
    dealer with the leftover labels flagged empty.
    """
    dealer_ids = list(features)
    n = len(dealer_ids)
    if n == 0:
        raise ContractError("kmeans_cluster needs at least one dealer")
    raw = np.stack([features[d].as_vector() for d in dealer_ids])
    z = _z_normalize(raw)

    if n < k:
        labels = {d: i for i, d in enumerate(dealer_ids)}
        centroids = np.zeros((k, z.shape[1]))
        centroids[:n] = z
        return ClusterAssignment(
            labels=labels,
            centroids=centroids,
            k=k,
            empty_labels=tuple(range(n, k)),
        )

    rng = rng_for(seed, "kmeans")
    centroids = _kmeanspp_init(z, k, rng)
    labels = np.full(n, -1, dtype=np.intp)
    degenerate = False
    wcss_history: list[float] = []
    for _ in range(max_iter):
        dist2 = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = dist2.argmin(axis=1)

        for c in range(k):
            if (new_labels == c).any():
                continue
            counts = np.bincount(new_labels, minlength=k)
            biggest = int(counts.argmax())
            members = np.flatnonzero(new_labels == biggest)
            far = members[int(dist2[members, biggest].argmax())]
            if dist2[far, biggest] == 0.0:
                degenerate = True
                continue
            new_labels[far] = c

        for c in range(k):
            members = new_labels == c
            if members.any():
                centroids[c] = z[members].mean(axis=0)
        dist2 = ((z - centroids[new_labels]) ** 2).sum(axis=1)
        wcss_history.append(float(dist2.sum()))

        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

    empty = tuple(c for c in range(k) if not (labels == c).any())
    return ClusterAssignment(
        labels={d: int(labels[i]) for i, d in enumerate(dealer_ids)},
        centroids=centroids,
        k=k,
        empty_labels=empty,
        degenerate=degenerate or bool(empty),
        wcss_history=tuple(wcss_history),
    )


def order_clusters(
    assignment: ClusterAssignment, features: dict[str, DealerFeatures]
) -> ClusterAssignment:
    """Permute labels so mean total_trades is nondecreasing in the label.

    Ties break by mean distinct bonds, then by the original label, so the
    ordering is stable and deterministic.  Empty labels sort last.
    """
    sums: dict[int, list[float]] = {}
    for dealer, label in assignment.labels.items():
        f = features[dealer]
        entry = sums.setdefault(label, [0.0, 0.0, 0.0])
        entry[0] += f.total_trades
        entry[1] += f.distinct_bonds
        entry[2] += 1.0

    def sort_key(label: int):
        if label not in sums:
            return (float("inf"), float("inf"), label)
        total, distinct, count = sums[label]
        return (total / count, distinct / count, label)

    old_order = sorted(range(assignment.k), key=sort_key)
    relabel = {old: new for new, old in enumerate(old_order)}
    return replace(
        assignment,
        labels={d: relabel[c] for d, c in assignment.labels.items()},
        centroids=assignment.centroids[old_order],
        empty_labels=tuple(sorted(relabel[c] for c in assignment.empty_labels)),
    )


def save_assignment(path, assignment: ClusterAssignment) -> None:
    """Comma-separated lines of dealer_id, cluster_label (ascending dealer id)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for dealer in sorted(assignment.labels):
            writer.writerow([dealer, assignment.labels[dealer]])


def load_assignment(path) -> dict[str, int]:
    labels: dict[str, int] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                labels[row[0]] = int(row[1])
    return labels
