"""Prototype-based few-shot classification over frozen embeddings."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import CesClass, DatasetManifest, sample_support_set
from .embeddings.vectors import EmbeddingVector, class_prototype, cosine_similarity, softmax
from .errors import ConfigError, DataError
from .metrics import ConfusionMatrix, MetricsReport, compute

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FewShotConfig:
    shots: tuple[int, ...] = (10,)
    trials: int = 30
    base_seed: int = 0
    model_id: str = ""
    normalize_before_average: bool = False
    max_shots: int = 10
    workers: int = 1

    def __post_init__(self):
        shots = (self.shots,) if isinstance(self.shots, int) else tuple(self.shots)
        object.__setattr__(self, "shots", shots)
        if not shots:
            raise ConfigError("at least one shot count is required")
        for s in shots:
            if not 1 <= s <= self.max_shots:
                raise ConfigError(f"shots must lie in [1, {self.max_shots}], got {s}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")


@dataclass(frozen=True)
class QueryPrediction:
    predicted: CesClass
    probabilities: np.ndarray
    classes: tuple
    scores: np.ndarray
    tie: bool = False


def classify_query(
    prototypes: Mapping, query: EmbeddingVector, order: Sequence | None = None
) -> QueryPrediction:
    """Assign ``query`` to the prototype with the highest cosine similarity.

    Probabilities are the softmax of the similarities. Exact ties go to the
    class listed first in ``order`` (default: mapping order).
    """
    classes = tuple(order) if order is not None else tuple(prototypes)
    scores = np.array([cosine_similarity(prototypes[c], query) for c in classes])
    probs = softmax(scores)
    best = float(scores.max())
    winners = [i for i, s in enumerate(scores) if s == best]
    if len(winners) > 1:
        log.info("cosine tie between %s for %s", [str(classes[i]) for i in winners], query.item_id)
    return QueryPrediction(classes[winners[0]], probs, classes, scores, tie=len(winners) > 1)


@dataclass
class FewShotTrialResult:
    seed: int
    shots: int
    metrics: MetricsReport
    prototype_ids: dict
    ties: int = 0


def build_prototypes(partition, embeddings: Mapping[str, EmbeddingVector], normalize: bool = False) -> dict:
    protos = {}
    for cls, recs in partition.support.items():
        protos[cls] = class_prototype(
            [embeddings[r.id] for r in recs],
            prototype_id=f"prototype:{cls.name}:seed{partition.seed}:shots{partition.shots}",
            normalize=normalize,
        )
    return protos


def run_trial(
    manifest: DatasetManifest,
    config: FewShotConfig,
    seed: int,
    embeddings: Mapping[str, EmbeddingVector],
    shots: int | None = None,
) -> FewShotTrialResult:
    """One support/query draw: build prototypes, classify every query, score."""
    shots = config.shots[0] if shots is None else shots
    partition = sample_support_set(manifest, shots, seed, max_shots=config.max_shots)
    missing = [r.id for r in manifest.labeled() if r.id not in embeddings]
    if missing:
        raise DataError(f"{len(missing)} records have no embedding (first: {missing[0]!r})")
    protos = build_prototypes(partition, embeddings, config.normalize_before_average)
    preds, ties = [], 0
    for rec in partition.query:
        out = classify_query(protos, embeddings[rec.id], order=manifest.taxonomy)
        ties += out.tie
        preds.append((rec.id, out.predicted))
    metrics = compute(preds, [(r.id, r.label) for r in partition.query],
                      classes=manifest.taxonomy, label=f"fewshot shots={shots} seed={seed}")
    if ties:
        metrics.flags.append(f"cosine_ties:{ties}")
    return FewShotTrialResult(seed, shots, metrics, {c: p.item_id for c, p in protos.items()}, ties)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var)


@dataclass
class ShotSummary:
    shots: int
    trials: list[FewShotTrialResult]
    precision: tuple[float, float]
    recall: tuple[float, float]
    accuracy: tuple[float, float]
    per_class: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "shots": self.shots,
            "trials": len(self.trials),
            "seeds": [t.seed for t in self.trials],
            "precision": {"mean": self.precision[0], "std": self.precision[1]},
            "recall": {"mean": self.recall[0], "std": self.recall[1]},
            "accuracy": {"mean": self.accuracy[0], "std": self.accuracy[1]},
            "per_class": {getattr(c, "value", str(c)): {"mean": m, "std": s}
                          for c, (m, s) in self.per_class.items()},
            "ties": sum(t.ties for t in self.trials),
        }


def summarize(shots: int, trials: Sequence[FewShotTrialResult]) -> ShotSummary:
    """Arithmetic mean and sample standard deviation of each metric over trials."""
    trials = list(trials)
    per_class = {}
    for c in trials[0].metrics.per_class:
        per_class[c] = _mean_std([t.metrics.per_class.get(c, 0.0) for t in trials])
    return ShotSummary(
        shots,
        trials,
        _mean_std([t.metrics.precision for t in trials]),
        _mean_std([t.metrics.recall for t in trials]),
        _mean_std([t.metrics.accuracy for t in trials]),
        per_class,
    )


def run_experiment(
    manifest: DatasetManifest,
    config: FewShotConfig,
    embeddings: Mapping[str, EmbeddingVector],
) -> list[ShotSummary]:
    """Run ``config.trials`` trials per shot count; trial ``t`` uses seed ``base_seed + t``."""
    summaries = []
    for shots in config.shots:
        seeds = [config.base_seed + t for t in range(config.trials)]
        if config.workers > 1:
            with ThreadPoolExecutor(config.workers) as pool:
                results = list(pool.map(lambda s: run_trial(manifest, config, s, embeddings, shots), seeds))
        else:
            results = [run_trial(manifest, config, s, embeddings, shots) for s in seeds]
        summaries.append(summarize(shots, results))
    return summaries


def curve_csv(summaries: Sequence[ShotSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["shots", "trials", "precision", "precision_std", "recall", "recall_std",
                "accuracy", "accuracy_std"])
    for s in summaries:
        w.writerow([s.shots, len(s.trials),
                    f"{s.precision[0]:.2f}", f"{s.precision[1]:.2f}",
                    f"{s.recall[0]:.2f}", f"{s.recall[1]:.2f}",
                    f"{s.accuracy[0]:.2f}", f"{s.accuracy[1]:.2f}"])
    return buf.getvalue()


def summary_report(summary: ShotSummary, label: str = "") -> MetricsReport:
    """A MetricsReport carrying the trial-averaged metrics and the pooled confusion matrix."""
    first = summary.trials[0].metrics
    pooled = first.confusion.counts.copy()
    unresolved = first.confusion.unresolved.copy()
    for t in summary.trials[1:]:
        pooled += t.metrics.confusion.counts
        unresolved += t.metrics.confusion.unresolved
    return MetricsReport(
        precision=summary.precision[0],
        recall=summary.recall[0],
        accuracy=summary.accuracy[0],
        per_class={c: m for c, (m, _) in summary.per_class.items()},
        confusion=ConfusionMatrix(first.confusion.classes, pooled, unresolved),
        n_items=int(pooled.sum() + unresolved.sum()),
        flags=[f"averaged_over_trials:{len(summary.trials)}", "confusion_pooled_over_trials"],
        label=label or f"fewshot shots={summary.shots}",
    )
