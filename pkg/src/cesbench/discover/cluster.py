from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError, TooFewPoints

NOISE = -1


@dataclass
class ClusterAssignment:
    """Cluster label per item; ``NOISE`` (-1) marks points outside every cluster."""

    item_ids: tuple[str, ...]
    labels: np.ndarray
    algorithm: str
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.item_ids = tuple(self.item_ids)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.item_ids) != self.labels.shape[0]:
            raise ValueError("item_ids and labels differ in length")

    @property
    def clusters(self) -> list[int]:
        return sorted(int(c) for c in set(self.labels.tolist()) if c != NOISE)

    @property
    def n_noise(self) -> int:
        return int(np.sum(self.labels == NOISE))

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.item_ids, (int(v) for v in self.labels)))

    def members(self, label: int) -> list[str]:
        return [i for i, lab in zip(self.item_ids, self.labels) if lab == label]


def _ids(n: int, item_ids: Sequence[str] | None) -> tuple[str, ...]:
    return tuple(item_ids) if item_ids is not None else tuple(str(i) for i in range(n))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(X, X[idx : idx + 1])[:, 0])
    return X[chosen].copy()


def cluster_kmeans(
    vectors,
    k: int = 6,
    seed: int = 0,
    item_ids: Sequence[str] | None = None,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> ClusterAssignment:
    """Lloyd's algorithm from k-means++ seeding.

    Stops once no centroid moves more than ``tol`` or after ``max_iter``
    iterations. An empty cluster is reseeded at the point farthest from its
    current centroid.
    """
    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if n < k:
        raise TooFewPoints(f"k={k} clusters need at least {k} points, got {n}")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        D = _sq_dists(X, C)
        labels = np.argmin(D, axis=1)
        newC = np.empty_like(C)
        for j in range(k):
            members = labels == j
            if members.any():
                newC[j] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(D[np.arange(n), labels]))
                labels[far] = j
                D[far] = 0.0
                newC[j] = X[far]
        shift = float(np.sqrt(((newC - C) ** 2).sum(axis=1)).max())
        C = newC
        if shift < tol:
            break
    D = _sq_dists(X, C)
    labels = np.argmin(D, axis=1)
    inertia = float(D[np.arange(n), labels].sum())
    return ClusterAssignment(_ids(n, item_ids), labels, "kmeans",
                             {"k": k, "seed": seed, "inertia": inertia, "n_iter": it,
                              "centroids": C.tolist()})


def cluster_hdbscan(
    vectors,
    min_cluster_size: int = 20,
    selection: str = "leaf",
    item_ids: Sequence[str] | None = None,
    min_samples: int | None = None,
) -> ClusterAssignment:
    """Density clustering with Euclidean mutual reachability (scikit-learn's HDBSCAN)."""
    from sklearn.cluster import HDBSCAN

    X = np.asarray(vectors, dtype=np.float64)
    n = X.shape[0]
    if selection not in ("leaf", "eom"):
        raise ConfigError(f"selection must be leaf or eom, got {selection!r}")
    if min_cluster_size < 2:
        raise ConfigError("min_cluster_size must be >= 2")
    if n <= min_cluster_size:
        raise TooFewPoints(f"need more than min_cluster_size={min_cluster_size} points, got {n}")
    info = {"min_cluster_size": min_cluster_size, "selection": selection}
    if np.all(X == X[0]):
        # zero-spread input has no density structure; treat it as a single cluster
        return ClusterAssignment(_ids(n, item_ids), np.zeros(n, dtype=np.int64), "hdbscan",
                                 {**info, "degenerate": True})
    model = HDBSCAN(
        min_cluster_size=min_cluster_size,
        min_samples=min_samples,
        metric="euclidean",
        cluster_selection_method=selection,
    )
    labels = model.fit_predict(X)
    labels = np.where(labels < 0, NOISE, labels)
    return ClusterAssignment(_ids(n, item_ids), labels, "hdbscan", info)

