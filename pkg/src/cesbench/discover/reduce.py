"""Neighbour-graph dimensionality reduction in the UMAP family.

Builds a fuzzy k-nearest-neighbour graph, initialises with a spectral
embedding (laid out per connected component when the graph falls apart) and
refines the layout by stochastic gradient descent on the
fuzzy cross-entropy with negative sampling. Exact (brute-force) neighbours
are used, which is fine for the few thousand points this project handles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.optimize import curve_fit
from scipy.sparse.csgraph import connected_components

from ..embeddings.vectors import EmbeddingVector
from ..errors import ConfigError, DegenerateInput, DimensionMismatch, TooFewPoints, ZeroNormVector

log = logging.getLogger(__name__)

SMOOTH_K_TOLERANCE = 1e-5
MIN_K_DIST_SCALE = 1e-3


@dataclass(frozen=True)
class ReductionConfig:
    n_neighbors: int = 15
    output_dims: int = 20
    metric: str = "cosine"
    seed: int = 42
    min_dist: float = 0.1
    spread: float = 1.0
    n_epochs: int | None = None
    negative_sample_rate: int = 5

    def __post_init__(self):
        if self.n_neighbors < 2:
            raise ConfigError("n_neighbors must be >= 2")
        if self.output_dims < 1:
            raise ConfigError("output_dims must be >= 1")
        if self.metric not in ("cosine", "euclidean"):
            raise ConfigError(f"unsupported metric {self.metric!r}")


def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        X = np.asarray(vectors, dtype=np.float64)
    else:
        vectors = list(vectors)
        if vectors and isinstance(vectors[0], EmbeddingVector):
            dims = {v.dims for v in vectors}
            if len(dims) != 1:
                raise DimensionMismatch(f"mixed embedding dims {sorted(dims)}")
            X = np.stack([v.values for v in vectors])
        else:
            X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionMismatch("expected a 2-D array of vectors")
    return X


def pairwise_distances(X: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        norms = np.linalg.norm(X, axis=1)
        if np.any(norms == 0):
            raise ZeroNormVector("cosine distance is undefined for zero-norm vectors")
        U = X / norms[:, None]
        D = 1.0 - U @ U.T
    else:
        sq = np.einsum("ij,ij->i", X, X)
        D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0))
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _smooth_knn(knn_d: np.ndarray, k: int, n_iter: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Per-point ``rho`` (nearest non-zero distance) and ``sigma`` by bisection."""
    target = np.log2(k)
    n = knn_d.shape[0]
    rho = np.zeros(n)
    sigma = np.ones(n)
    mean_all = knn_d.mean()
    for i in range(n):
        d = knn_d[i]
        nz = d[d > 0]
        rho[i] = nz[0] if nz.size else 0.0
        lo, hi, mid = 0.0, np.inf, 1.0
        for _ in range(n_iter):
            psum = np.exp(-np.maximum(d[1:] - rho[i], 0.0) / mid).sum()
            if abs(psum - target) < SMOOTH_K_TOLERANCE:
                break
            if psum > target:
                hi = mid
                mid = (lo + hi) / 2.0
            else:
                lo = mid
                mid = mid * 2 if hi == np.inf else (lo + hi) / 2.0
        floor = MIN_K_DIST_SCALE * (d.mean() if rho[i] > 0 else mean_all)
        sigma[i] = max(mid, floor)
    return rho, sigma


def fuzzy_graph(D: np.ndarray, k: int) -> np.ndarray:
    """Symmetric fuzzy membership matrix (dense) from a distance matrix."""
    n = D.shape[0]
    order = np.argsort(D, axis=1, kind="stable")
    # put each point first in its own neighbour list even when duplicates exist
    knn = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = order[i][order[i] != i]
        knn[i, 0] = i
        knn[i, 1:] = row[: k - 1]
    knn_d = np.take_along_axis(D, knn, axis=1)
    rho, sigma = _smooth_knn(knn_d, k)
    A = np.zeros((n, n))
    for i in range(n):
        w = np.exp(-np.maximum(knn_d[i, 1:] - rho[i], 0.0) / sigma[i])
        A[i, knn[i, 1:]] = w
    return A + A.T - A * A.T


@lru_cache(maxsize=16)
def fit_ab(spread: float, min_dist: float) -> tuple[float, float]:
    """Fit the low-dimensional similarity curve ``1 / (1 + a d^(2b))``."""
    xv = np.linspace(0, spread * 3, 300)
    yv = np.where(xv < min_dist, 1.0, np.exp(-(xv - min_dist) / spread))
    params, _ = curve_fit(lambda x, a, b: 1.0 / (1.0 + a * x ** (2 * b)), xv, yv)
    return float(params[0]), float(params[1])


def _laplacian_eigvecs(P: np.ndarray, dim: int) -> np.ndarray | None:
    """The ``dim`` smallest non-trivial eigenvectors of the normalised Laplacian."""
    deg = P.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    L = np.eye(P.shape[0]) - inv_sqrt[:, None] * P * inv_sqrt[None, :]
    try:
        _, vecs = np.linalg.eigh(L)
    except np.linalg.LinAlgError:
        return None
    return vecs[:, 1 : dim + 1]


def _component_anchors(X: np.ndarray, labels: np.ndarray, n_comp: int, dim: int, metric: str) -> np.ndarray:
    """Positions for the components themselves.

    With many components their centroids are embedded spectrally from a
    Gaussian affinity of centroid distances; with few, they are spread over
    the signed coordinate axes.
    """
    if n_comp > 2 * dim:
        centroids = np.stack([X[labels == c].mean(axis=0) for c in range(n_comp)])
        dist = pairwise_distances(centroids, metric)
        vecs = _laplacian_eigvecs(np.exp(-(dist**2)), dim)
        if vecs is not None:
            return vecs / np.abs(vecs).max()
    k = int(np.ceil(n_comp / 2))
    base = np.hstack([np.eye(k), np.zeros((k, max(dim - k, 0)))])[:, :dim]
    return np.vstack([base, -base])[:n_comp]


def spectral_init(
    P: np.ndarray,
    dim: int,
    rng: np.random.Generator,
    X: np.ndarray | None = None,
    metric: str = "cosine",
) -> np.ndarray:
    """Spectral embedding of the fuzzy graph, scaled to a ±10 box.

    A disconnected graph has one zero eigenvalue per component, so a global
    embedding would place components arbitrarily; instead each component is
    embedded on its own around an anchor (see ``_component_anchors``).
    """
    n = P.shape[0]
    n_comp, labels = connected_components(sp.csr_matrix(P), directed=False)
    if n_comp == 1:
        if n <= dim + 1:
            return rng.uniform(-10, 10, size=(n, dim))
        Y = _laplacian_eigvecs(P, dim)
        if Y is None:
            log.warning("spectral initialisation failed; falling back to random")
            return rng.uniform(-10, 10, size=(n, dim))
    else:
        data = X if X is not None else np.eye(n)
        anchors = _component_anchors(data, labels, n_comp, dim, metric)
        gaps = pairwise_distances(anchors, "euclidean")
        Y = np.zeros((n, dim))
        for c in range(n_comp):
            members = np.nonzero(labels == c)[0]
            row = gaps[c][gaps[c] > 0]
            half = row.min() / 2.0 if row.size else 1.0
            vecs = _laplacian_eigvecs(P[np.ix_(members, members)], dim) if members.size > 2 * dim else None
            if vecs is None or vecs.shape[1] < dim:
                local = rng.uniform(-half, half, size=(members.size, dim))
            else:
                local = vecs * (half / max(np.abs(vecs).max(), 1e-300))
            Y[members] = local + anchors[c]
    scale = np.abs(Y).max()
    Y = 10.0 * Y / scale if scale > 0 else Y
    return Y + rng.normal(scale=1e-4, size=Y.shape)


def _scatter_add(n: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Row sums ``out[i] = sum(vals[idx == i])`` via a sparse incidence product."""
    m = idx.size
    incidence = sp.csr_matrix((np.ones(m, dtype=vals.dtype), (idx, np.arange(m))), shape=(n, m))
    return incidence @ vals


def optimize_layout(
    Y: np.ndarray,
    P: np.ndarray,
    a: float,
    b: float,
    n_epochs: int,
    rng: np.random.Generator,
    negative_sample_rate: int = 5,
) -> np.ndarray:
    """Edge-sampled SGD, vectorised per epoch.

    All edges due in an epoch are evaluated against the same positions, so
    each point moves by the mean of the gradient terms it received rather
    than their sum; summing would let high-degree points take steps many
    times the clip bound.
    """
    n = Y.shape[0]
    heads, tails = np.nonzero(np.triu(P, 1))
    w = P[heads, tails]
    keep = w >= w.max() / n_epochs
    heads, tails, w = heads[keep], tails[keep], w[keep]
    heads, tails = np.concatenate([heads, tails]), np.concatenate([tails, heads])
    w = np.concatenate([w, w])
    eps = w.max() / w
    next_sample = eps.copy()
    Y = Y.astype(np.float32)  # single precision, as is usual for this optimisation
    for epoch in range(n_epochs):
        alpha = 1.0 - epoch / n_epochs
        due = np.nonzero(next_sample <= epoch + 1)[0]
        if due.size == 0:
            continue
        next_sample[due] += eps[due]
        h, t = heads[due], tails[due]
        diff = Y[h] - Y[t]
        d2 = np.einsum("ij,ij->i", diff, diff)
        coef = np.zeros_like(d2)
        pos = d2 > 0
        coef[pos] = -2.0 * a * b * d2[pos] ** (b - 1.0) / (a * d2[pos] ** b + 1.0)
        g_pos = np.clip(coef[:, None] * diff, -4.0, 4.0)
        # negative samples push heads away from random points
        hn = np.repeat(h, negative_sample_rate)
        tn = rng.integers(0, n, size=hn.size)
        diff = Y[hn] - Y[tn]
        d2 = np.einsum("ij,ij->i", diff, diff)
        coef = 2.0 * b / ((0.001 + d2) * (a * d2**b + 1.0))
        g_neg = np.where((d2 > 0)[:, None], np.clip(coef[:, None] * diff, -4.0, 4.0), 0.0)
        g_neg[hn == tn] = 0.0
        # attraction is symmetric (heads and tails both move); repulsion moves heads only
        step = _scatter_add(n, np.concatenate([h, t, hn]), np.concatenate([g_pos, -g_pos, g_neg]))
        count = np.bincount(h, minlength=n) + np.bincount(t, minlength=n)
        Y += (alpha / np.maximum(count, 1))[:, None].astype(Y.dtype) * step
    return Y


def reduce_dimensions(vectors, config: ReductionConfig = ReductionConfig()) -> np.ndarray:
    """Project ``vectors`` to ``config.output_dims`` dimensions, preserving input order."""
    X = _as_matrix(vectors)
    n, d = X.shape
    if config.output_dims >= d:
        raise ConfigError(f"output_dims ({config.output_dims}) must be below input dims ({d})")
    if n <= config.n_neighbors:
        raise TooFewPoints(f"need more than {config.n_neighbors} points, got {n}")
    if np.all(X == X[0]):
        raise DegenerateInput("all input points are identical")
    rng = np.random.default_rng(config.seed)
    D = pairwise_distances(X, config.metric)
    P = fuzzy_graph(D, config.n_neighbors)
    a, b = fit_ab(config.spread, config.min_dist)
    n_epochs = config.n_epochs or (500 if n <= 10_000 else 200)
    Y = spectral_init(P, config.output_dims, rng, X, config.metric)
    return optimize_layout(Y, P, a, b, n_epochs, rng, config.negative_sample_rate).astype(np.float64)
