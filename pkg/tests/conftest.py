"""Shared synthetic fixtures.

Every generator here is seeded and documented so that oracle tests can reason
about the geometry they construct (separation, density gaps, provenance).
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from cesbench.dataset import TAXONOMY, synthetic_manifest
from cesbench.embeddings.vectors import EmbeddingVector

FIXTURES = Path(__file__).parent / "fixtures"


def load_fixture(name: str):
    path = FIXTURES / name
    if path.suffix == ".json":
        return json.loads(path.read_text(encoding="utf-8"))
    return path.read_text(encoding="utf-8")


def gaussian_blobs(centers, n_per: int, sigma: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``n_per`` isotropic Gaussian points around each centre; labels are centre indices."""
    centers = np.asarray(centers, dtype=np.float64)
    rng = np.random.default_rng(seed)
    X = np.concatenate([c + sigma * rng.standard_normal((n_per, centers.shape[1])) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per)
    return X, y


def three_class_blobs(seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Linearly separable 2-D blobs: centres 6 apart, sigma 0.5, 50 points each."""
    return gaussian_blobs([(0.0, 0.0), (6.0, 0.0), (3.0, 5.0)], 50, 0.5, seed)


def six_blobs(seed: int = 0, dims: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Six blobs on scaled axis directions (pairwise centre distance ~14), sigma 0.5."""
    centers = 10.0 * np.eye(dims)[:6]
    return gaussian_blobs(centers, 50, 0.5, seed)


def blobs_with_outliers(seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two dense 2-D blobs (200 points each, sigma 0.5) plus 10 outliers labelled -1.

    The blobs are 5 apart, so they separate at a mutual-reachability scale of
    about 2. Outliers are uniform in [-15, 20] x [-15, 15], rejected unless at
    least 7 units from both centres and 4 units from each other: they leave
    the density hierarchy before the blobs split and can only be noise.
    """
    centres = ((0.0, 0.0), (5.0, 0.0))
    X, y = gaussian_blobs(centres, 200, 0.5, seed)
    rng = np.random.default_rng(seed + 1)
    outliers: list[np.ndarray] = []
    while len(outliers) < 10:
        p = rng.uniform((-15.0, -15.0), (20.0, 15.0))
        if min(np.linalg.norm(p - np.array(c)) for c in centres) < 7.0:
            continue
        if any(np.linalg.norm(p - q) < 4.0 for q in outliers):
            continue
        outliers.append(p)
    return np.vstack([X, np.array(outliers)]), np.concatenate([y, -np.ones(10, dtype=int)])


def two_blobs_50d(seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two far-separated 50-D Gaussian blobs, 100 points each."""
    centers = np.zeros((2, 50))
    centers[1, :] = 3.0
    return gaussian_blobs(centers, 100, 1.0, seed)


def class_embeddings(manifest, separation: float = 8.0, noise: float = 1.0, dims: int = 32, seed: int = 0,
                     model_id: str = "synthetic") -> dict[str, EmbeddingVector]:
    """Class-conditioned Gaussian embeddings: unit-direction centroid * separation + N(0, noise^2)."""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal((len(TAXONOMY), dims))
    centroids = separation * c / np.linalg.norm(c, axis=1, keepdims=True)
    pos = {cls: i for i, cls in enumerate(TAXONOMY)}
    out = {}
    for rec in manifest.records:
        v = centroids[pos[rec.label]] + noise * rng.standard_normal(dims)
        out[rec.id] = EmbeddingVector(rec.id, "image", model_id, v)
    return out


@pytest.fixture(scope="session")
def manifest960():
    return synthetic_manifest(160)


@pytest.fixture
def small_manifest():
    return synthetic_manifest(20)


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE_LINES: list[str] = []


@contextmanager
def criterion(name: str, limit_s: float | None = None):
    """Time a criterion block, enforce its runtime limit and record a PASS/FAIL line."""
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start
        if limit_s is not None:
            assert elapsed < limit_s, f"runtime {elapsed:.2f}s exceeds the {limit_s:g}s limit"
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        line = f"FAIL  {name}  ({elapsed:.2f}s) -- {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"PASS  {name}  ({elapsed:.2f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
